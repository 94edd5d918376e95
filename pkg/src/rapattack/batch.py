from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import torch

from .errors import InvalidInputError


@dataclass
class ImageBatch:
    """N x C x H x W pixels in [0, 1] with their labels.

    ``indices`` are the images' global ids within the dataset; random streams
    of stochastic transforms are keyed on them, which is what makes results
    independent of how a dataset is split into batches.
    """

    x: torch.Tensor
    labels: torch.Tensor
    targets: torch.Tensor | None = None
    indices: torch.Tensor | None = None

    def __post_init__(self):
        if self.x.ndim != 4:
            raise InvalidInputError(f"ImageBatch expects N x C x H x W, got shape {tuple(self.x.shape)}")
        n = self.x.shape[0]
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.labels.shape != (n,):
            raise InvalidInputError("labels must have one entry per image")
        if self.targets is not None:
            self.targets = torch.as_tensor(self.targets, dtype=torch.long)
            if self.targets.shape != (n,):
                raise InvalidInputError("targets must have one entry per image")
        if self.indices is None:
            self.indices = torch.arange(n)
        else:
            self.indices = torch.as_tensor(self.indices, dtype=torch.long)
            if self.indices.shape != (n,):
                raise InvalidInputError("indices must have one entry per image")

    def __len__(self) -> int:
        return self.x.shape[0]

    def loss_labels(self, mode: str) -> torch.Tensor:
        """Labels fed to the attack loss: targets when targeted, true labels otherwise."""
        if mode == "targeted":
            if self.targets is None:
                raise InvalidInputError("targeted mode requires target labels in the batch")
            return self.targets
        return self.labels

    def with_x(self, x: torch.Tensor) -> "ImageBatch":
        return ImageBatch(x, self.labels, self.targets, self.indices)

    def __getitem__(self, item) -> "ImageBatch":
        if isinstance(item, int):
            item = slice(item, item + 1)
        return ImageBatch(
            self.x[item],
            self.labels[item],
            None if self.targets is None else self.targets[item],
            self.indices[item],
        )

    def split(self, size: int) -> Iterator["ImageBatch"]:
        if size < 1:
            raise InvalidInputError("batch size must be positive")
        for start in range(0, len(self), size):
            yield self[start:start + size]

    @classmethod
    def concat(cls, batches: list["ImageBatch"]) -> "ImageBatch":
        has_targets = all(b.targets is not None for b in batches)
        return cls(
            torch.cat([b.x for b in batches]),
            torch.cat([b.labels for b in batches]),
            torch.cat([b.targets for b in batches]) if has_targets else None,
            torch.cat([b.indices for b in batches]),
        )

"""Attack losses, oriented so that the outer loop always *minimizes* them."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError, NumericError

LOSS_KINDS = ("cross_entropy", "logit")
MODES = ("targeted", "untargeted")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cross_entropy"
    mode: str = "untargeted"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.mode not in MODES:
            raise InvalidConfigError(f"unknown attack mode {self.mode!r}; expected one of {MODES}")

    @property
    def targeted(self) -> bool:
        return self.mode == "targeted"


def per_sample_loss(logits: torch.Tensor, labels: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    """Per-example loss as minimized by the attack.

    Targeted losses push towards ``labels`` (the target classes). Untargeted
    losses are the targeted ones with the sign flipped and the true labels
    substituted, so minimizing them pushes *away* from ``labels``.
    """
    if logits.ndim != 2:
        raise InvalidInputError(f"logits must be N x classes, got shape {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.shape != logits.shape[:1]:
        raise InvalidInputError(f"{labels.numel()} labels for {logits.shape[0]} rows of logits")
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")

    if spec.kind == "cross_entropy":
        loss = F.cross_entropy(logits, labels, reduction="none")
    else:
        loss = -logits.gather(1, labels[:, None])[:, 0]
    return loss if spec.targeted else -loss


def attack_loss(logits: torch.Tensor, labels: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    return per_sample_loss(logits, labels, spec).mean()

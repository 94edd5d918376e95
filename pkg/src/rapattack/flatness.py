"""Loss-change profiles f(a) along random unit directions around adversarial examples."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import InvalidInputError
from .losses import LossSpec, per_sample_loss
from .pipelines import PipelineSpec, RandomStreams

DEFAULT_MAGNITUDES = tuple(np.linspace(0.0, 16 / 255, 11).tolist())


@dataclass
class FlatnessProfile:
    magnitudes: list[float]
    mean_delta: list[float]
    n_directions: int
    seed: int
    per_image: np.ndarray = field(repr=False, default=None)  # N x len(magnitudes)
    image_ids: list[int] = field(default_factory=list)

    def area(self) -> float:
        return float(np.trapezoid(self.mean_delta, self.magnitudes))


def sample_direction(shape, rng: np.random.Generator) -> torch.Tensor:
    """Standard Gaussian draw rescaled to unit L2 norm over the whole tensor."""
    if len(shape) == 0 or int(np.prod(shape)) == 0:
        raise InvalidInputError("direction shape must be non-empty")
    while True:
        d = rng.standard_normal(shape)
        norm = np.linalg.norm(d)
        if norm > 0:
            return torch.from_numpy(d / norm)


def _losses(model, x, labels, spec, pipeline, streams):
    if pipeline is None:
        return per_sample_loss(model.forward(x), labels, spec)
    copies = pipeline.transform_inputs(x, streams)
    return sum(per_sample_loss(model.forward(c), labels, spec) for c in copies) / len(copies)


@torch.no_grad()
def flatness_profile(
    model,
    x_adv: torch.Tensor,
    labels: torch.Tensor,
    spec: LossSpec,
    magnitudes: Sequence[float] = DEFAULT_MAGNITUDES,
    n_directions: int = 20,
    seed: int = 0,
    pipeline: PipelineSpec | None = None,
    image_ids: Sequence[int] | None = None,
) -> FlatnessProfile:
    """Mean over random directions d of L(x_adv + a*d) - L(x_adv), per image and batch-averaged.

    Directions are drawn per image from streams keyed on (seed, image id, draw).
    With ``pipeline`` the loss is evaluated through its input transforms (a fixed
    draw per direction); by default the raw input is used.
    """
    if n_directions < 1:
        raise InvalidInputError("n_directions must be >= 1")
    mags = [float(a) for a in magnitudes]
    if 0.0 not in mags:
        raise InvalidInputError("magnitudes must include 0")
    n = x_adv.shape[0]
    ids = list(range(n)) if image_ids is None else [int(i) for i in image_ids]
    labels = torch.as_tensor(labels, dtype=torch.long)
    nonzero = [a for a in mags if a != 0.0]
    deltas = np.zeros((n, len(mags)))
    for j in range(n_directions):
        streams = RandomStreams(seed, ids, j)
        base = _losses(model, x_adv, labels, spec, pipeline, streams)
        d = torch.stack([sample_direction(x_adv.shape[1:], np.random.default_rng([seed, i, j])) for i in ids])
        d = d.to(x_adv.dtype)
        for a in nonzero:
            moved = _losses(model, x_adv + a * d, labels, spec, pipeline, streams)
            deltas[:, mags.index(a)] += (moved - base).double().numpy()
    deltas /= n_directions
    return FlatnessProfile(mags, deltas.mean(axis=0).tolist(), n_directions, seed, deltas, ids)


def compare_profiles(profiles: Mapping[str, FlatnessProfile], reference: str | None = None) -> dict:
    """Per-magnitude differences to ``reference`` (default: first entry) and trapezoid areas."""
    if not profiles:
        raise InvalidInputError("no profiles to compare")
    names = list(profiles)
    reference = reference or names[0]
    mags = profiles[reference].magnitudes
    for name, p in profiles.items():
        if not np.allclose(p.magnitudes, mags, rtol=0, atol=0):
            raise InvalidInputError(f"profile {name!r} uses a different magnitude grid")
    ref = np.asarray(profiles[reference].mean_delta)
    report = {"magnitudes": list(mags), "reference": reference, "recipes": {}}
    for name, p in profiles.items():
        entry = {
            "mean_delta": list(p.mean_delta),
            "difference": (np.asarray(p.mean_delta) - ref).tolist(),
            "area": p.area(),
        }
        if p.per_image is not None:
            entry["mean_image_area"] = float(np.trapezoid(p.per_image, mags, axis=1).mean())
        report["recipes"][name] = entry
    report["area_order"] = sorted(names, key=lambda k: report["recipes"][k]["area"])
    return report


def write_profile_csv(profile: FlatnessProfile, path: str | Path):
    """Rows of (image_id, a, f_mean)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "a", "f_mean"])
        for row, img in zip(profile.per_image, profile.image_ids):
            for a, f in zip(profile.magnitudes, row):
                w.writerow([img, repr(a), repr(float(f))])

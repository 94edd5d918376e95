"""Bundled synthetic 10-class image set: Gaussian class blobs in a latent space,
rendered through a fixed bank of smooth colour textures."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .batch import ImageBatch


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    size: int = 32
    latent_dim: int = 24
    n_waves: int = 4
    max_freq: float = 5.0
    class_spread: float = 1.0
    within_spread: float = 0.8
    gain: float = 1.2
    pixel_noise: float = 0.03
    world_seed: int = 2022

    @property
    def dataset_id(self) -> str:
        return f"synthetic-w{self.world_seed}-c{self.num_classes}-s{self.size}"


def _texture_bank(spec: SyntheticSpec) -> np.ndarray:
    """latent_dim x 3 x size x size bank of band-limited colour textures."""
    rng = np.random.default_rng([spec.world_seed, 0])
    t = np.arange(spec.size) / spec.size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    bank = np.zeros((spec.latent_dim, 3, spec.size, spec.size))
    for j in range(spec.latent_dim):
        for _ in range(spec.n_waves):
            freq = rng.uniform(0.5, spec.max_freq)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            bank[j] += rng.normal(size=3)[:, None, None] * wave
        bank[j] /= np.sqrt((bank[j] ** 2).mean())
    return bank


def _class_means(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.world_seed, 1])
    return rng.normal(scale=spec.class_spread, size=(spec.num_classes, spec.latent_dim))


def make_synthetic(n: int, seed: int, spec: SyntheticSpec = SyntheticSpec(), balanced: bool = True):
    """``n`` images (float32, N x 3 x size x size in [0, 1]) and labels.

    The class geometry depends only on ``spec.world_seed``; ``seed`` picks the samples.
    """
    rng = np.random.default_rng([spec.world_seed, 2, seed])
    if balanced:
        y = np.arange(n) % spec.num_classes
        rng.shuffle(y)
    else:
        y = rng.integers(0, spec.num_classes, size=n)
    z = _class_means(spec)[y] + rng.normal(scale=spec.within_spread, size=(n, spec.latent_dim))
    field = np.einsum("nj,jchw->nchw", z, _texture_bank(spec)) / np.sqrt(spec.latent_dim)
    img = 1.0 / (1.0 + np.exp(-spec.gain * field))
    img += rng.normal(scale=spec.pixel_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return torch.from_numpy(img.astype(np.float32)), torch.from_numpy(y.astype(np.int64))


def random_targets(labels: torch.Tensor, num_classes: int, seed: int) -> torch.Tensor:
    """A fixed target class per image, never equal to its true label."""
    rng = np.random.default_rng([seed, 3])
    shift = torch.from_numpy(rng.integers(1, num_classes, size=len(labels)))
    return (labels + shift) % num_classes


def toy_splits(spec: SyntheticSpec = SyntheticSpec(), n_train: int = 6000, n_test: int = 1000, seed: int = 0):
    """(x_train, y_train, x_test, y_test) for model training."""
    x_tr, y_tr = make_synthetic(n_train, seed, spec)
    x_te, y_te = make_synthetic(n_test, seed + 1, spec)
    return x_tr, y_tr, x_te, y_te


def attack_set(n: int, spec: SyntheticSpec = SyntheticSpec(), seed: int = 7) -> ImageBatch:
    """Held-out images with targets for attack experiments (disjoint seed from training)."""
    x, y = make_synthetic(n, 1000 + seed, spec)
    return ImageBatch(x, y, random_targets(y, spec.num_classes, seed))

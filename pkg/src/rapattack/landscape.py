"""Two-basin synthetic landscape (one sharp, one flat minimum) on [0, 1]^2 and a
brute-force grid oracle for basin membership.

The landscape is exposed as a two-class ``FunctionModel`` whose targeted logit
loss (target class 0) equals the potential, so the attack code runs on it
unchanged. Inputs are batches of shape N x 1 x 1 x 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .batch import ImageBatch
from .models import FunctionModel

SHARP, FLAT = 0, 1


@dataclass(frozen=True)
class TwoBasinLandscape:
    sharp_center: tuple[float, float] = (0.35, 0.5)
    sharp_width: float = 0.02
    sharp_depth: float = 2.0
    flat_center: tuple[float, float] = (0.7, 0.5)
    flat_width: float = 0.15
    flat_depth: float = 1.0

    def potential(self, x):
        """Sum of two negative Gaussian wells; ``x`` has a trailing axis of size 2.

        Works on torch tensors (differentiable) and numpy arrays.
        """
        lib = torch if isinstance(x, torch.Tensor) else np
        out = 0.0
        for c, w, d in ((self.sharp_center, self.sharp_width, self.sharp_depth),
                        (self.flat_center, self.flat_width, self.flat_depth)):
            r2 = (x[..., 0] - c[0]) ** 2 + (x[..., 1] - c[1]) ** 2
            out = out - d * lib.exp(-r2 / (2 * w**2))
        return out

    def model(self) -> FunctionModel:
        return FunctionModel(lambda x: self.potential(x.reshape(x.shape[0], 2)), (1, 1, 2))

    def batch(self, points) -> ImageBatch:
        pts = torch.as_tensor(np.asarray(points), dtype=torch.float64).reshape(-1, 1, 1, 2)
        zeros = torch.zeros(len(pts), dtype=torch.long)
        return ImageBatch(pts, torch.ones_like(zeros), zeros)


class BasinOracle:
    """Labels every cell of a regular grid on [0, 1]^2 by the local minimum that
    discrete steepest descent (8-neighbourhood) reaches from it.

    Moving to the lowest of the 8 neighbours picks the diagonal whenever both
    gradient components are nonzero, so to first order this is the L-inf (sign)
    descent the attacks perform rather than Euclidean gradient flow.
    """

    def __init__(self, landscape: TwoBasinLandscape, resolution: float = 1e-3):
        self.landscape = landscape
        self.n = int(round(1 / resolution)) + 1
        self.h = 1.0 / (self.n - 1)

    @cached_property
    def labels(self) -> np.ndarray:
        n = self.n
        t = np.linspace(0.0, 1.0, n)
        grid = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1)
        v = self.landscape.potential(grid)
        padded = np.pad(v, 1, constant_values=np.inf)
        flat_idx = np.arange(n * n).reshape(n, n)
        best_val, best = v.copy(), flat_idx.copy()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == dj == 0:
                    continue
                nv = padded[1 + di:1 + di + n, 1 + dj:1 + dj + n]
                better = nv < best_val
                best_val = np.where(better, nv, best_val)
                best = np.where(better, np.roll(flat_idx, (-di, -dj), axis=(0, 1)), best)
        ptr = best.ravel()
        while True:
            nxt = ptr[ptr]
            if np.array_equal(nxt, ptr):
                break
            ptr = nxt
        minima = np.unique(ptr)
        coords = np.stack([minima // n, minima % n], axis=1) * self.h
        sharp_d = np.linalg.norm(coords - self.landscape.sharp_center, axis=1)
        flat_d = np.linalg.norm(coords - self.landscape.flat_center, axis=1)
        kind = np.where(sharp_d < flat_d, SHARP, FLAT)
        lookup = dict(zip(minima.tolist(), kind.tolist()))
        return np.vectorize(lookup.__getitem__)(ptr).reshape(n, n)

    def basin_of(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        idx = np.clip(np.rint(pts / self.h).astype(int), 0, self.n - 1)
        return self.labels[idx[:, 0], idx[:, 1]]

    def basin_radius(self, kind: int = SHARP) -> float:
        """Largest distance from the basin's centre to a grid cell labelled ``kind``."""
        center = self.landscape.sharp_center if kind == SHARP else self.landscape.flat_center
        ii, jj = np.nonzero(self.labels == kind)
        return float(np.sqrt((ii * self.h - center[0]) ** 2 + (jj * self.h - center[1]) ** 2).max())

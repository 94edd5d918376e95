"""Input-transform stacks (DI, SI, Admix, EOT) and gradient transforms (MI, TI).

Input transforms map one differentiable tensor to a list of transformed
copies; the attack gradient is the mean of the per-copy gradients, and each
copy costs one forward and one backward pass. Gradient transforms post-process
that averaged gradient before the sign step.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError
from .losses import LossSpec, attack_loss


class RandomStreams:
    """Deterministic per-image random streams keyed on (seed, image id, iteration, path).

    ``path`` grows as streams are handed down through nested transforms so that
    different transforms (and different EOT samples) never share draws.
    """

    def __init__(self, seed: int, indices: Sequence[int], iteration: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.indices = [int(i) for i in indices]
        self.iteration = int(iteration)
        self.path = tuple(path)

    def child(self, *key: int) -> "RandomStreams":
        return RandomStreams(self.seed, self.indices, self.iteration, self.path + tuple(key))

    def for_image(self, i: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.indices[i], self.iteration, len(self.path), *self.path])


# ---------------------------------------------------------------------------
# input transforms
# ---------------------------------------------------------------------------

def _check_image(x: torch.Tensor):
    if x.ndim != 4:
        raise InvalidInputError(f"expected N x C x H x W, got {tuple(x.shape)}")
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise InvalidInputError("diverse-input resizing needs H, W >= 2")


def resize_pad(img: torch.Tensor, size: tuple[int, int], canvas: tuple[int, int], offset: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a C x H x W image to ``size``, zero-pad it onto ``canvas`` at
    ``offset`` (top, left), and resize the canvas back to H x W."""
    h, w = img.shape[-2:]
    out = F.interpolate(img[None], size=size, mode="bilinear", align_corners=False)
    top, left = offset
    pad = (left, canvas[1] - size[1] - left, top, canvas[0] - size[0] - top)
    out = F.pad(out, pad, mode="constant", value=0.0)
    if tuple(out.shape[-2:]) != (h, w):
        out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
    return out[0]


def di_transform(x: torch.Tensor, prob: float, streams: RandomStreams, max_scale: float = 1.1) -> torch.Tensor:
    """Diverse-input transform, drawn independently for every image.

    With probability ``prob`` an image is enlarged by a factor in
    [1, max_scale], zero-padded at a random offset onto a canvas
    ``max_scale`` times the input side, and resized back to H x W.
    """
    if not 0.0 <= prob <= 1.0:
        raise InvalidConfigError("DI probability must lie in [0, 1]")
    _check_image(x)
    h, w = x.shape[-2:]
    canvas = (int(round(h * max_scale)), int(round(w * max_scale)))
    out = []
    for i in range(x.shape[0]):
        rng = streams.for_image(i)
        # draw everything up front so the stream layout does not depend on the coin
        coin, factor = rng.random(), rng.uniform(1.0, max_scale)
        u_top, u_left = rng.random(), rng.random()
        if coin >= prob:
            out.append(x[i])
            continue
        size = (min(canvas[0], int(round(h * factor))), min(canvas[1], int(round(w * factor))))
        top = int(u_top * (canvas[0] - size[0] + 1))
        left = int(u_left * (canvas[1] - size[1] + 1))
        out.append(resize_pad(x[i], size, canvas, (top, left)))
    return torch.stack(out)


def si_scaled_copies(x: torch.Tensor, m: int) -> list[torch.Tensor]:
    if m < 1:
        raise InvalidConfigError("SI needs at least one copy")
    return [x / 2**i for i in range(m)]


def admix_copies(
    x: torch.Tensor,
    mix_pool: torch.Tensor,
    m2: int,
    eta: float,
    m1: int,
    streams: RandomStreams,
    exclude_self: bool = True,
) -> list[torch.Tensor]:
    """Admix: for each of ``m2`` pool draws form x + eta * x', then take ``m1`` SI copies.

    When ``exclude_self`` is set and the pool is the batch itself, image i never
    mixes with pool entry i unless the pool has a single entry.
    """
    if m2 < 1 or m1 < 1:
        raise InvalidConfigError("Admix needs m1 >= 1 and m2 >= 1")
    if not 0.0 <= eta < 1.0:
        raise InvalidConfigError("Admix eta must lie in [0, 1)")
    if mix_pool.shape[0] == 0:
        raise InvalidInputError("Admix mix pool is empty")
    pool = mix_pool.detach()
    n_pool = pool.shape[0]
    rngs = [streams.for_image(i) for i in range(x.shape[0])]
    copies = []
    for _ in range(m2):
        picks = []
        for i, rng in enumerate(rngs):
            if exclude_self and n_pool > 1 and i < n_pool:
                j = int(rng.integers(0, n_pool - 1))
                j += j >= i
            else:
                j = int(rng.integers(0, n_pool))
            picks.append(j)
        mixed = x + eta * pool[picks]
        copies.extend(si_scaled_copies(mixed, m1))
    return copies


@dataclass(frozen=True)
class Identity:
    name = "identity"

    @property
    def multiplicity(self) -> int:
        return 1

    def copies(self, x, streams):
        return [x]

    def to_dict(self):
        return {"name": "identity"}


@dataclass(frozen=True)
class DiverseInput:
    prob: float = 0.7
    max_scale: float = 1.1
    name = "di"

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise InvalidConfigError("di.prob must lie in [0, 1]")
        if self.max_scale < 1.0:
            raise InvalidConfigError("di.max_scale must be >= 1")

    @property
    def multiplicity(self) -> int:
        return 1

    def copies(self, x, streams):
        return [di_transform(x, self.prob, streams, self.max_scale)]

    def to_dict(self):
        return {"name": "di", "prob": self.prob, "max_scale": self.max_scale}


@dataclass(frozen=True)
class ScaleInvariant:
    m: int = 5
    name = "si"

    def __post_init__(self):
        if self.m < 1:
            raise InvalidConfigError("si.m must be >= 1")

    @property
    def multiplicity(self) -> int:
        return self.m

    def copies(self, x, streams):
        return si_scaled_copies(x, self.m)

    def to_dict(self):
        return {"name": "si", "m": self.m}


@dataclass(frozen=True)
class Admix:
    m1: int = 5
    m2: int = 3
    eta: float = 0.2
    name = "admix"

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise InvalidConfigError("admix.m1 and admix.m2 must be >= 1")
        if not 0.0 <= self.eta < 1.0:
            raise InvalidConfigError("admix.eta must lie in [0, 1)")

    @property
    def multiplicity(self) -> int:
        return self.m1 * self.m2

    def copies(self, x, streams):
        return admix_copies(x, x, self.m2, self.eta, self.m1, streams)

    def to_dict(self):
        return {"name": "admix", "m1": self.m1, "m2": self.m2, "eta": self.eta}


@dataclass(frozen=True)
class EOT:
    """Average the wrapped transform over ``n_samples`` independent draws."""

    inner: Any = field(default_factory=DiverseInput)
    n_samples: int = 10
    name = "eot"

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidConfigError("eot.n_samples must be >= 1")

    @property
    def multiplicity(self) -> int:
        return self.n_samples * self.inner.multiplicity

    def copies(self, x, streams):
        out = []
        for s in range(self.n_samples):
            out.extend(self.inner.copies(x, streams.child(s)))
        return out

    def to_dict(self):
        return {"name": "eot", "n_samples": self.n_samples, "inner": self.inner.to_dict()}


def eot_average(transform, n_samples: int) -> EOT:
    return EOT(transform, n_samples)


# ---------------------------------------------------------------------------
# gradient transforms
# ---------------------------------------------------------------------------

def gaussian_kernel(kernel_size: int, dtype=torch.float64) -> torch.Tensor:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidConfigError("TI kernel size must be a positive odd integer")
    r = kernel_size // 2
    sigma = kernel_size / 3
    t = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-t**2 / (2 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype)


def ti_kernel_smooth(grad: torch.Tensor, kernel_size: int, padding: str = "zeros") -> torch.Tensor:
    """Depthwise Gaussian smoothing of an N x C x H x W gradient, same-size output.

    ``padding`` is "zeros" (the attack default) or "circular".
    """
    kernel = gaussian_kernel(kernel_size, grad.dtype).to(grad.device)
    if kernel_size == 1:
        return grad.clone()
    c = grad.shape[1]
    weight = kernel.expand(c, 1, kernel_size, kernel_size).contiguous()
    r = kernel_size // 2
    if padding == "circular":
        padded = F.pad(grad, (r, r, r, r), mode="circular")
        return F.conv2d(padded, weight, groups=c)
    if padding != "zeros":
        raise InvalidConfigError(f"unknown padding {padding!r}")
    return F.conv2d(grad, weight, padding=r, groups=c)


@dataclass
class MomentumState:
    mu: float
    accumulated: torch.Tensor | None = None


def momentum_update(g: torch.Tensor, state: MomentumState) -> torch.Tensor:
    """state <- mu * state + g / ||g||_1 with the L1 norm taken per image."""
    if state.accumulated is None:
        state.accumulated = torch.zeros_like(g)
    if state.accumulated.shape != g.shape:
        raise InvalidInputError("momentum state shape does not match the gradient")
    norm = g.abs().flatten(1).sum(1).view(-1, *([1] * (g.ndim - 1)))
    zero = norm == 0
    if zero.any():
        warnings.warn("zero gradient in momentum update; keeping decayed state for those images", RuntimeWarning)
    normalized = torch.where(zero, torch.zeros_like(g), g / torch.where(zero, torch.ones_like(norm), norm))
    state.accumulated = state.mu * state.accumulated + normalized
    return state.accumulated


@dataclass(frozen=True)
class Momentum:
    mu: float = 1.0
    name = "mi"

    def __post_init__(self):
        if self.mu < 0:
            raise InvalidConfigError("mi.mu must be >= 0")

    def new_state(self):
        return MomentumState(self.mu)

    def apply(self, g, state):
        return momentum_update(g, state)

    def to_dict(self):
        return {"name": "mi", "mu": self.mu}


@dataclass(frozen=True)
class TISmooth:
    kernel_size: int = 5
    name = "ti"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfigError("ti.kernel_size must be a positive odd integer")

    def new_state(self):
        return None

    def apply(self, g, state):
        return ti_kernel_smooth(g, self.kernel_size)

    def to_dict(self):
        return {"name": "ti", "kernel_size": self.kernel_size}


INPUT_TRANSFORMS = {"identity": Identity, "di": DiverseInput, "si": ScaleInvariant, "admix": Admix, "eot": EOT}
GRAD_TRANSFORMS = {"mi": Momentum, "ti": TISmooth}


def descriptor_from_dict(d: dict):
    d = dict(d)
    try:
        name = d.pop("name")
    except KeyError:
        raise InvalidConfigError(f"transform descriptor without a name: {d}") from None
    if name == "eot":
        inner = d.pop("inner", {"name": "di"})
        return EOT(descriptor_from_dict(inner), **d)
    cls = INPUT_TRANSFORMS.get(name) or GRAD_TRANSFORMS.get(name)
    if cls is None:
        raise InvalidConfigError(f"unknown transform {name!r}")
    try:
        return cls(**d)
    except TypeError as e:
        raise InvalidConfigError(f"bad parameters for {name}: {e}") from None


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineSpec:
    input_transforms: tuple = ()
    grad_transforms: tuple = ()

    @property
    def multiplicity(self) -> int:
        return math.prod(t.multiplicity for t in self.input_transforms)

    def new_state(self) -> list:
        return [t.new_state() for t in self.grad_transforms]

    def transform_inputs(self, x: torch.Tensor, streams: RandomStreams) -> list[torch.Tensor]:
        copies = [x]
        for pos, t in enumerate(self.input_transforms):
            sub = streams.child(pos)
            copies = [y for j, c in enumerate(copies) for y in t.copies(c, sub.child(j))]
        return copies

    def input_gradient(self, model, x: torch.Tensor, labels, spec: LossSpec, streams: RandomStreams, counter=None):
        """Mean loss over the transformed copies of ``x`` and its gradient w.r.t. ``x``."""
        x = x.detach().requires_grad_(True)
        copies = self.transform_inputs(x, streams)
        loss = sum(attack_loss(model.forward(c), labels, spec) for c in copies) / len(copies)
        (grad,) = torch.autograd.grad(loss, x)
        if counter is not None:
            counter.add(len(copies))
        return grad, float(loss.detach())

    def transform_gradient(self, g: torch.Tensor, state: list) -> torch.Tensor:
        for t, s in zip(self.grad_transforms, state):
            g = t.apply(g, s)
        return g

    def to_list(self) -> list[dict]:
        return [t.to_dict() for t in self.input_transforms + self.grad_transforms]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "PipelineSpec":
        inputs, grads = [], []
        for item in items:
            t = descriptor_from_dict(item)
            if isinstance(t, Identity):
                continue
            (grads if isinstance(t, (Momentum, TISmooth)) else inputs).append(t)
        return cls(tuple(inputs), tuple(grads))


# Preset stacks used by the experiments, grad transforms in TI -> MI order.
PRESETS = {
    "I": [],
    "MI": [{"name": "mi", "mu": 1.0}],
    "TI": [{"name": "ti", "kernel_size": 5}],
    "DI": [{"name": "di", "prob": 0.7}],
    "SI": [{"name": "si", "m": 5}],
    "Admix": [{"name": "admix", "m1": 5, "m2": 3, "eta": 0.2}],
    "MTDI": [{"name": "di", "prob": 0.7}, {"name": "ti", "kernel_size": 5}, {"name": "mi", "mu": 1.0}],
    "MTDSI": [{"name": "di", "prob": 0.7}, {"name": "si", "m": 5}, {"name": "ti", "kernel_size": 5}, {"name": "mi", "mu": 1.0}],
    "MTDAI": [{"name": "di", "prob": 0.7}, {"name": "admix", "m1": 5, "m2": 3, "eta": 0.2},
              {"name": "ti", "kernel_size": 5}, {"name": "mi", "mu": 1.0}],
    "MTDI-EOT": [{"name": "eot", "n_samples": 10, "inner": {"name": "di", "prob": 0.7}},
                 {"name": "ti", "kernel_size": 5}, {"name": "mi", "mu": 1.0}],
}


def preset(name: str) -> PipelineSpec:
    try:
        return PipelineSpec.from_list(PRESETS[name])
    except KeyError:
        raise InvalidConfigError(f"unknown pipeline preset {name!r}; known: {sorted(PRESETS)}") from None

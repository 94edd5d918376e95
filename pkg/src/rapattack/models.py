"""Differentiable classifier handles, toy reference models, ensembles and the model store."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .errors import CapabilityError, InvalidConfigError, InvalidInputError, TrainingFailure
from .losses import LossSpec, attack_loss

log = logging.getLogger(__name__)

GRADIENT_CAPS = frozenset({"forward", "input_gradient"})


class ModelHandle:
    """Classifier contract used by the attacks: raw [0, 1] pixels in, logits out.

    Subclasses implement ``_logits``; any preprocessing happens inside the handle.
    """

    num_classes: int
    input_shape: tuple[int, ...]
    capabilities: frozenset = GRADIENT_CAPS
    concurrent_safe: bool = True

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise InvalidInputError(f"expected input shape (N, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}")
        return self._logits(x)

    __call__ = forward

    def input_gradient(self, x: torch.Tensor, spec: LossSpec, labels) -> torch.Tensor:
        if "input_gradient" not in self.capabilities:
            raise CapabilityError(f"{type(self).__name__} has no input gradients")
        x = x.detach().requires_grad_(True)
        loss = attack_loss(self.forward(x), labels, spec)
        (g,) = torch.autograd.grad(loss, x)
        return g

    @torch.no_grad()
    def predict(self, x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
        """Argmax labels; ties go to the lowest class index."""
        if len(x) == 0:
            return torch.zeros(0, dtype=torch.long)
        return torch.cat([self.forward(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])


class TorchModel(ModelHandle):
    """Wraps an ``nn.Module`` that expects standardized inputs."""

    def __init__(self, net: nn.Module, num_classes: int, input_shape: Sequence[int], mean=None, std=None):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        c = self.input_shape[0]
        dtype = next(net.parameters()).dtype
        self.mean = torch.as_tensor(mean if mean is not None else [0.0] * c, dtype=dtype).view(1, c, *([1] * (len(self.input_shape) - 1)))
        self.std = torch.as_tensor(std if std is not None else [1.0] * c, dtype=dtype).view(1, c, *([1] * (len(self.input_shape) - 1)))

    @property
    def dtype(self):
        return self.mean.dtype

    def _logits(self, x):
        return self.net((x.to(self.dtype) - self.mean) / self.std)

    def to(self, dtype) -> "TorchModel":
        """Copy of this handle with parameters cast to ``dtype``."""
        return TorchModel(copy.deepcopy(self.net).to(dtype), self.num_classes, self.input_shape,
                          self.mean.flatten().to(dtype), self.std.flatten().to(dtype))


class FunctionModel(ModelHandle):
    """Two-class model with logits [-phi(x), 0] for a scalar potential phi.

    Under a targeted logit loss with target 0 the attack loss is exactly phi,
    which makes analytic landscapes usable as surrogates.
    """

    num_classes = 2

    def __init__(self, potential: Callable[[torch.Tensor], torch.Tensor], input_shape: Sequence[int]):
        self.potential = potential
        self.input_shape = tuple(input_shape)

    def _logits(self, x):
        phi = self.potential(x)
        return torch.stack([-phi, torch.zeros_like(phi)], dim=1)


class Ensemble(ModelHandle):
    """Logit-averaging ensemble."""

    def __init__(self, members: Sequence[ModelHandle]):
        if not members:
            raise InvalidConfigError("ensemble needs at least one member")
        first = members[0]
        for m in members[1:]:
            if m.num_classes != first.num_classes or tuple(m.input_shape) != tuple(first.input_shape):
                raise InvalidConfigError("ensemble members must share num_classes and input_shape")
        if any("input_gradient" not in m.capabilities for m in members):
            raise CapabilityError("every ensemble member must be differentiable")
        self.members = list(members)
        self.num_classes = first.num_classes
        self.input_shape = tuple(first.input_shape)
        self.concurrent_safe = all(m.concurrent_safe for m in members)

    def _logits(self, x):
        return sum(m.forward(x) for m in self.members) / len(self.members)


def ensemble(models: Sequence[ModelHandle]) -> Ensemble:
    return Ensemble(models)


# ---------------------------------------------------------------------------
# toy architectures and training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyModelSpec:
    architecture: str = "small_cnn"
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 10
    seed: int = 0
    dataset_id: str = "synthetic-v1"
    input_shape: tuple[int, ...] = (3, 32, 32)
    epochs: int = 8
    lr: float = 2e-3
    batch_size: int = 64
    accuracy_floor: float = 0.5

    def __post_init__(self):
        if self.architecture not in ("mlp", "small_cnn"):
            raise InvalidConfigError(f"unknown architecture {self.architecture!r}")
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_net(spec: ToyModelSpec) -> nn.Module:
    c, h, w = spec.input_shape
    if spec.architecture == "mlp":
        layers, d = [nn.Flatten()], c * h * w
        for width in spec.widths:
            layers += [nn.Linear(d, width), nn.ReLU()]
            d = width
        layers.append(nn.Linear(d, spec.num_classes))
        return nn.Sequential(*layers)
    *convs, hidden = spec.widths
    layers, ch = [], c
    for width in convs:
        layers += [nn.Conv2d(ch, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
        ch = width
        h, w = h // 2, w // 2
    layers += [nn.Flatten(), nn.Linear(ch * h * w, hidden), nn.ReLU(), nn.Linear(hidden, spec.num_classes)]
    return nn.Sequential(*layers)


@torch.no_grad()
def accuracy(model: ModelHandle, x: torch.Tensor, y: torch.Tensor) -> float:
    return float((model.predict(x) == y).float().mean()) if len(y) else float("nan")


def train_toy(spec: ToyModelSpec, dataset, store: "ModelStore | None" = None, name: str | None = None) -> TorchModel:
    """Seeded training of a toy classifier; bitwise reproducible on one machine.

    ``dataset`` is (x_train, y_train, x_test, y_test) with pixels in [0, 1].
    """
    x_tr, y_tr, x_te, y_te = dataset
    if tuple(x_tr.shape[1:]) != spec.input_shape:
        raise InvalidInputError(f"dataset images {tuple(x_tr.shape[1:])} do not match {spec.input_shape}")
    if y_tr.max() >= spec.num_classes:
        raise InvalidInputError("dataset labels exceed num_classes")

    torch.manual_seed(spec.seed)
    net = build_net(spec)
    mean = x_tr.mean(dim=(0, 2, 3))
    std = x_tr.std(dim=(0, 2, 3)).clamp_min(1e-3)
    model = TorchModel(net, spec.num_classes, spec.input_shape, mean, std)
    for p in net.parameters():
        p.requires_grad_(True)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=spec.lr)
    gen = torch.Generator().manual_seed(spec.seed)
    z_tr = (x_tr - model.mean) / model.std
    for epoch in range(spec.epochs):
        perm = torch.randperm(len(x_tr), generator=gen)
        for i in range(0, len(perm), spec.batch_size):
            idx = perm[i:i + spec.batch_size]
            loss = nn.functional.cross_entropy(net(z_tr[idx]), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)

    train_acc, test_acc = accuracy(model, x_tr, y_tr), accuracy(model, x_te, y_te)
    log.info("trained %s seed=%d: train acc %.3f, test acc %.3f", spec.architecture, spec.seed, train_acc, test_acc)
    if test_acc < spec.accuracy_floor:
        raise TrainingFailure(f"test accuracy {test_acc:.3f} below floor {spec.accuracy_floor}")
    model.manifest = {"spec": asdict(spec), "train_accuracy": train_acc, "test_accuracy": test_acc,
                      "mean": mean.tolist(), "std": std.tolist(), "spec_key": spec.key()}
    if store is not None:
        store.save(name or f"{spec.architecture}-{spec.seed}", model, model.manifest)
    return model


class ModelStore:
    """Directory-per-model store: ``<root>/<name>/weights.pt`` plus ``manifest.json``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str, spec: ToyModelSpec | None = None) -> bool:
        mf = self.path(name) / "manifest.json"
        if not mf.exists() or not (self.path(name) / "weights.pt").exists():
            return False
        return spec is None or json.loads(mf.read_text()).get("spec_key") == spec.key()

    def save(self, name: str, model: TorchModel, manifest: dict):
        d = self.path(name)
        d.mkdir(parents=True, exist_ok=True)
        tmp = d / "weights.pt.tmp"
        torch.save(model.net.state_dict(), tmp)
        os.replace(tmp, d / "weights.pt")
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def load(self, name: str) -> TorchModel:
        d = self.path(name)
        if not (d / "manifest.json").exists():
            raise FileNotFoundError(f"no model {name!r} in store {self.root}")
        manifest = json.loads((d / "manifest.json").read_text())
        spec = ToyModelSpec(**manifest["spec"])
        net = build_net(spec)
        net.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
        model = TorchModel(net, spec.num_classes, spec.input_shape, manifest["mean"], manifest["std"])
        model.manifest = manifest
        return model

    def get_or_train(self, name: str, spec: ToyModelSpec, dataset_fn: Callable[[], tuple]) -> TorchModel:
        if self.exists(name, spec):
            return self.load(name)
        return train_toy(spec, dataset_fn(), self, name)

"""Reverse adversarial perturbation (RAP) min-max attack with late start.

Each outer iteration optionally solves a short inner maximization for a
worst-case perturbation ``n_rap`` around the current adversarial example,
then takes one projected sign-gradient descent step on the attack loss at
``x_adv + n_rap``. With ``epsilon_n = 0`` or a late start at ``K`` the loop
is exactly the wrapped baseline attack.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import torch

from .batch import ImageBatch
from .errors import CapabilityError, InvalidConfigError, InvalidInputError, NumericError
from .losses import LossSpec, attack_loss
from .pipelines import PipelineSpec, RandomStreams

log = logging.getLogger(__name__)

BUDGET_SLACK = 1e-6


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise InvalidConfigError(f"epsilon must lie in (0, 1], got {self.epsilon}")


@dataclass(frozen=True)
class RAPConfig:
    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    K: int = 400
    K_LS: int = 100
    epsilon_n: float = 16 / 255
    alpha_n: float = 2 / 255
    T: int = 8
    loss: LossSpec = field(default_factory=LossSpec)
    checkpoints: tuple[int, ...] = (10, 100, 200, 300, 400)
    coupled_step: bool = False

    def __post_init__(self):
        AttackBudget(self.epsilon)
        if self.alpha <= 0:
            raise InvalidConfigError("alpha must be positive")
        if self.K < 1:
            raise InvalidConfigError("K must be a positive integer")
        if not 0 <= self.K_LS <= self.K:
            raise InvalidConfigError(f"K_LS must lie in [0, K], got {self.K_LS}")
        if self.T < 1:
            raise InvalidConfigError("T must be >= 1")
        if self.epsilon_n < 0:
            raise InvalidConfigError("epsilon_n must be >= 0")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossSpec(**self.loss))
        cps = tuple(sorted({int(c) for c in self.checkpoints}))
        if cps and (cps[0] < 1 or cps[-1] > self.K):
            raise InvalidConfigError(f"checkpoints must lie in [1, K={self.K}]")
        object.__setattr__(self, "checkpoints", cps)
        if self.coupled_step:
            object.__setattr__(self, "alpha_n", self.epsilon_n / self.T)
        elif self.alpha_n <= 0 and self.epsilon_n > 0:
            raise InvalidConfigError("alpha_n must be positive")

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(self.epsilon)

    def rap_active(self, k: int) -> bool:
        """Whether the inner maximization runs at zero-based outer iteration ``k``."""
        return self.epsilon_n > 0 and k >= self.K_LS

    def replace(self, **changes) -> "RAPConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = list(self.checkpoints)
        return d


@dataclass
class PassCounter:
    forward: int = 0
    backward: int = 0

    def add(self, n: int = 1):
        self.forward += n
        self.backward += n


@dataclass
class AttackTrace:
    x_adv: torch.Tensor
    checkpoints: dict[int, torch.Tensor]
    losses: list[float]
    forward_count: int
    backward_count: int
    rng_seed: int
    iterations: int
    truncated: bool = False


def expected_pass_count(cfg: RAPConfig, pipeline_multiplicity: int = 1) -> int:
    """Forward (= backward) passes of a full run: m*K + (K - K_LS)*T.

    The inner loop is skipped entirely when epsilon_n = 0.
    """
    inner = max(0, cfg.K - cfg.K_LS) * cfg.T if cfg.epsilon_n > 0 else 0
    return pipeline_multiplicity * cfg.K + inner


def require_input_gradient(model):
    if "input_gradient" not in getattr(model, "capabilities", ()):
        raise CapabilityError(f"{type(model).__name__} does not provide input gradients and cannot be a surrogate")


def project(candidate: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip into the L-inf ball around ``x``, then into the valid pixel range."""
    candidate = torch.min(torch.max(candidate, x - epsilon), x + epsilon)
    return candidate.clamp(0.0, 1.0)


def inner_maximize(
    model,
    x_adv: torch.Tensor,
    labels: torch.Tensor,
    spec: LossSpec,
    epsilon_n: float,
    alpha_n: float,
    T: int,
    counter: PassCounter | None = None,
    trajectory: list | None = None,
) -> torch.Tensor:
    """T steps of projected sign-gradient ascent on the attack loss, starting at n = 0.

    The probe point ``x_adv + n`` is not clipped to [0, 1]. If ``trajectory`` is
    given, the loss at every iterate n_0..n_T is appended to it (costs one extra
    forward pass per call, which is not counted).
    """
    if epsilon_n < 0:
        raise InvalidConfigError("epsilon_n must be >= 0")
    if T < 1:
        raise InvalidConfigError("T must be >= 1")
    require_input_gradient(model)
    x_adv = x_adv.detach()
    n = torch.zeros_like(x_adv)
    for _ in range(T):
        n.requires_grad_(True)
        loss = attack_loss(model.forward(x_adv + n), labels, spec)
        (g,) = torch.autograd.grad(loss, n)
        if counter is not None:
            counter.add(1)
        if trajectory is not None:
            trajectory.append(float(loss.detach()))
        n = (n.detach() + alpha_n * torch.sign(g)).clamp(-epsilon_n, epsilon_n)
    if trajectory is not None:
        with torch.no_grad():
            trajectory.append(float(attack_loss(model.forward(x_adv + n), labels, spec)))
    return n


def outer_step(
    model,
    x: torch.Tensor,
    x_adv: torch.Tensor,
    n_rap: torch.Tensor,
    labels: torch.Tensor,
    pipeline: PipelineSpec,
    cfg: RAPConfig,
    grad_state: list,
    streams: RandomStreams,
    counter: PassCounter | None = None,
) -> tuple[torch.Tensor, float]:
    """One projected sign-gradient descent step on L(model(G(x_adv + n_rap)))."""
    if not (x.shape == x_adv.shape == n_rap.shape):
        raise InvalidInputError(
            f"shape mismatch: x {tuple(x.shape)}, x_adv {tuple(x_adv.shape)}, n_rap {tuple(n_rap.shape)}"
        )
    g, loss = pipeline.input_gradient(model, x_adv + n_rap, labels, cfg.loss, streams, counter)
    g = pipeline.transform_gradient(g, grad_state)
    new = project(x_adv.detach() - cfg.alpha * torch.sign(g), x, cfg.epsilon)
    return new, loss


def check_budget(x: torch.Tensor, x_adv: torch.Tensor, epsilon: float):
    if (x_adv - x).abs().max() > epsilon + BUDGET_SLACK or x_adv.min() < 0 or x_adv.max() > 1:
        raise NumericError("adversarial example left the L-inf budget or the [0, 1] range")


def rap_attack(model, batch: ImageBatch, pipeline: PipelineSpec, cfg: RAPConfig, seed: int = 0) -> AttackTrace:
    """Run K outer iterations of RAP(-LS) over ``batch``.

    Zero-based iteration k runs the inner maximization iff k >= K_LS, i.e. the
    first K_LS iterations are plain baseline steps. A KeyboardInterrupt returns
    the trace up to the last completed iteration with ``truncated`` set.
    """
    require_input_gradient(model)
    x = batch.x.detach()
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise InvalidInputError("benign pixels must lie in [0, 1]")
    labels = batch.loss_labels(cfg.loss.mode)
    counter = PassCounter()
    state = pipeline.new_state()
    x_adv = x.clone()
    checkpoints: dict[int, torch.Tensor] = {}
    losses: list[float] = []
    wanted = set(cfg.checkpoints)
    k = 0
    truncated = False
    try:
        for k in range(cfg.K):
            if cfg.rap_active(k):
                n_rap = inner_maximize(model, x_adv, labels, cfg.loss, cfg.epsilon_n, cfg.alpha_n, cfg.T, counter)
            else:
                n_rap = torch.zeros_like(x_adv)
            streams = RandomStreams(seed, batch.indices.tolist(), k)
            x_adv, loss = outer_step(model, x, x_adv, n_rap, labels, pipeline, cfg, state, streams, counter)
            check_budget(x, x_adv, cfg.epsilon)
            losses.append(loss)
            if k + 1 in wanted:
                checkpoints[k + 1] = x_adv.clone()
        k = cfg.K
    except KeyboardInterrupt:
        log.warning("attack interrupted after %d of %d iterations", k, cfg.K)
        truncated = True
    return AttackTrace(
        x_adv=x_adv,
        checkpoints=checkpoints,
        losses=losses,
        forward_count=counter.forward,
        backward_count=counter.backward,
        rng_seed=seed,
        iterations=len(losses),
        truncated=truncated,
    )


def baseline_attack(model, batch: ImageBatch, pipeline: PipelineSpec, cfg: RAPConfig, seed: int = 0) -> AttackTrace:
    """The wrapped attack without reverse perturbation (I-FGSM for an empty pipeline)."""
    return rap_attack(model, batch, pipeline, cfg.replace(epsilon_n=0.0, coupled_step=False), seed)

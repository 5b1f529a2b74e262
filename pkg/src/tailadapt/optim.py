"""SGD with classic momentum, coupled L2 weight decay, and cosine annealing."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, ScheduleExhaustedError, ShapeError


@dataclass
class SgdHyper:
    lr0: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    eta_min: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.lr0 <= 0.0:
            raise InvalidConfigError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise InvalidConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.eta_min <= self.lr0:
            raise InvalidConfigError("eta_min must be in [0, lr0]")
        if self.total_steps < 1:
            raise InvalidConfigError("total_steps must be >= 1")


@dataclass
class SgdState:
    """Velocity buffer per parameter tensor, plus a step counter."""

    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def init_like(cls, params: dict[str, np.ndarray]) -> "SgdState":
        return cls(velocity={k: np.zeros_like(v) for k, v in params.items()})


def cosine_lr(step: int, hyper: SgdHyper) -> float:
    """Annealed rate eta_min + (lr0-eta_min)(1+cos(pi*step/T))/2."""
    if step < 0:
        raise ScheduleExhaustedError(f"schedule step {step} is negative")
    if step > hyper.total_steps:
        raise ScheduleExhaustedError(
            f"schedule step {step} exceeds total_steps={hyper.total_steps}"
        )
    frac = step / hyper.total_steps
    return hyper.eta_min + 0.5 * (hyper.lr0 - hyper.eta_min) * (1.0 + math.cos(math.pi * frac))


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: SgdState,
    hyper: SgdHyper,
    lr: float,
) -> None:
    """One update in place: v <- m*v + (g + wd*w); w <- w - lr*v."""
    if set(params) != set(grads) or set(params) != set(state.velocity):
        raise ShapeError("params, grads and velocity must share the same keys")
    for key, w in params.items():
        g = grads[key]
        if np.shape(g) != np.shape(w):
            raise ShapeError(f"grad shape {np.shape(g)} != param shape {np.shape(w)} for {key!r}")
        g_eff = g + hyper.weight_decay * w
        v = hyper.momentum * state.velocity[key] + g_eff
        state.velocity[key] = v
        params[key] = w - lr * v
    state.step_count += 1

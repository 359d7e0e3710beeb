"""Parameter update rules, the stepped learning-rate decay, early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StreamSVError
from .nn import ParameterSet


class OptimError(StreamSVError):
    pass


class StateShapeMismatch(OptimError):
    pass


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class LrSchedule:
    """lr(epoch) = initial * decay^floor(epoch / period_epochs)."""

    initial: float = 0.001
    decay: float = 0.95
    period_epochs: int = 10

    def __post_init__(self):
        if self.initial <= 0.0:
            raise OptimError(f"initial lr must be > 0, got {self.initial}")
        if not 0.0 < self.decay <= 1.0:
            raise OptimError(f"decay must lie in (0, 1], got {self.decay}")
        if self.period_epochs < 1:
            raise OptimError(f"period_epochs must be >= 1, got {self.period_epochs}")


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise OptimError(f"epoch must be >= 0, got {epoch}")
    return schedule.initial * schedule.decay ** (epoch // schedule.period_epochs)


class AdamState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    def __init__(self, params: ParameterSet):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.value)
            self.v[name] = np.zeros_like(p.value)

    def _check(self, params: ParameterSet) -> None:
        names = set(params.names())
        if names != set(self.m):
            raise StateShapeMismatch("optimizer state and parameter set name mismatch")
        for name, p in params.items():
            if self.m[name].shape != p.value.shape:
                raise StateShapeMismatch(
                    f"state for {name!r} has shape {self.m[name].shape}, "
                    f"parameter has {p.value.shape}"
                )


def adam_step(params: ParameterSet, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every parameter; zeroes gradients."""
    state._check(params)
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.grad[...] = 0.0


def sgd_step(params: ParameterSet, lr: float, weight_decay: float = 0.0) -> None:
    """Plain SGD with optional decoupled-style L2 pull; zeroes gradients."""
    if weight_decay < 0.0:
        raise OptimError(f"weight_decay must be >= 0, got {weight_decay}")
    for _, p in params.items():
        p.value -= lr * (p.grad + weight_decay * p.value)
        p.grad[...] = 0.0


def early_stop(history, patience: int) -> bool:
    """True iff the best (first-minimum) entry is more than `patience` back."""
    if patience < 1:
        raise OptimError(f"patience must be >= 1, got {patience}")
    values = list(history)
    if not values:
        return False
    best_idx = int(np.argmin(values))  # argmin takes the first minimum on ties
    return (len(values) - 1 - best_idx) > patience

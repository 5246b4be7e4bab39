"""Optimizers and learning-rate schedules for named parameter dicts.

Parameters live in ``dict[str, Tensor]`` maps; gradients arrive as
``dict[str, np.ndarray]`` from the tape.  Updates mutate ``Tensor.data`` in
place and keep per-parameter slot state inside an :class:`OptimizerState`.

Three update rules are provided:

* ``lars``: layer-wise adaptive rate scaling.  Each parameter tensor is a
  "layer"; the local step is ``lr_t * trust * (g + wd * w)`` accumulated into
  a momentum slot, where ``trust = eta * ||w|| / ||g + wd * w||``.  Layers
  with a zero weight or zero raw-gradient norm, and parameters matched by
  ``exclude`` (norm scales/offsets and biases by default), fall back to a
  plain SGD-with-momentum step (trust 1, no weight decay).
* ``sgd``: SGD with Nesterov momentum (momentum 0 gives vanilla SGD).
* ``adam``: bias-corrected Adam.

Schedules map a step index to a learning-rate value and refuse steps past the
configured budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = [
    "OptimizerState",
    "Schedule",
    "lars_update",
    "sgd_nesterov_update",
    "adam_update",
    "schedule_value",
    "make_optimizer",
    "apply_update",
    "default_lars_exclude",
]


def default_lars_exclude(name: str) -> bool:
    """Parameters excluded from LARS adaptation: norm affines and biases."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta", "bias", "b")


@dataclass
class OptimizerState:
    """Update-rule kind, hyper-parameters, and per-parameter slot arrays."""

    kind: str
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    eta: float = 0.001  # LARS trust coefficient
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def slot(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        per_param = self.slots.setdefault(name, {})
        if key not in per_param:
            per_param[key] = np.zeros_like(like)
        return per_param[key]


def make_optimizer(kind: str, lr: float, **hyper) -> OptimizerState:
    if kind not in ("lars", "sgd", "adam"):
        raise ValueError(f"unknown optimizer kind '{kind}'")
    return OptimizerState(kind=kind, lr=lr, **hyper)


def lars_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
    exclude=default_lars_exclude,
) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        w = p.data
        w_norm = float(np.linalg.norm(w))
        g_norm = float(np.linalg.norm(g))
        adapted = not exclude(name) and w_norm > 0.0 and g_norm > 0.0
        if adapted:
            g_eff = g + state.weight_decay * w
            trust = state.eta * w_norm / float(np.linalg.norm(g_eff))
        else:
            g_eff = g
            trust = 1.0
        v = state.slot(name, "momentum", w)
        v *= state.momentum
        v += lr_t * trust * g_eff
        w -= v
    state.step_count += 1


def sgd_nesterov_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
) -> None:
    mu = state.momentum
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g_eff = g + state.weight_decay * p.data
        if mu == 0.0:
            p.data -= lr_t * g_eff
            continue
        v = state.slot(name, "momentum", p.data)
        v *= mu
        v += g_eff
        # Nesterov look-ahead: step along the gradient plus the damped velocity
        p.data -= lr_t * (g_eff + mu * v)
    state.step_count += 1


def adam_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
) -> None:
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g_eff = g + state.weight_decay * p.data
        m = state.slot(name, "m", p.data)
        v = state.slot(name, "v", p.data)
        m *= b1
        m += (1.0 - b1) * g_eff
        v *= b2
        v += (1.0 - b2) * g_eff * g_eff
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr_t * m_hat / (np.sqrt(v_hat) + state.eps)


_UPDATES = {
    "lars": lars_update,
    "sgd": sgd_nesterov_update,
    "adam": adam_update,
}


def apply_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float | None = None,
) -> None:
    """Run one update of ``state.kind`` at rate ``lr_t`` (default ``state.lr``)."""
    _UPDATES[state.kind](params, grads, state, state.lr if lr_t is None else lr_t)


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule over a fixed step budget.

    kinds: ``constant``; ``linear`` decays ``base * (1 - t / max_steps)``;
    ``exponential`` is a staircase ``base * factor ** floor(t / decay_step)``.
    """

    kind: str
    base: float
    max_steps: int
    decay_factor: float = 0.1
    decay_step: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "exponential"):
            raise ValueError(f"unknown schedule kind '{self.kind}'")
        if self.max_steps <= 0:
            raise ValueError("schedule max_steps must be positive")
        if self.kind == "exponential" and self.decay_step <= 0:
            raise ValueError("exponential schedule needs decay_step >= 1")

    def value(self, t: int) -> float:
        return schedule_value(self, t)


def schedule_value(schedule: Schedule, t: int) -> float:
    """Rate at step ``t`` (0-based); ``t`` past the budget is an error."""
    if t < 0 or t > schedule.max_steps:
        raise ValueError(f"step {t} outside schedule budget {schedule.max_steps}")
    if schedule.kind == "constant":
        return schedule.base
    if schedule.kind == "linear":
        return schedule.base * (1.0 - t / schedule.max_steps)
    return schedule.base * schedule.decay_factor ** (t // schedule.decay_step)

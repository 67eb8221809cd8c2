"""First-order optimizers over named parameter lists.

``optimizer_apply`` is the single update entry point: it mutates parameter
tensors in place, keeps per-parameter moment buffers inside the
:class:`OptimizerState`, and refuses NaN gradients with a diagnostic that
names the parameter.  Ascent vs descent is the caller's business — pass
negated gradients (or a negated loss) to climb.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Update rule plus its mutable buffers.

    kind: "sgd" or "adam".  Adam uses bias-corrected moments with
    ``eps`` added outside the square root, so a zero gradient produces an
    exactly zero update.
    """

    kind: str = "sgd"
    lr: float = 5e-5
    betas: tuple = (0.5, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not (self.lr > 0):
            raise ValueError("learning rate must be positive")
        b1, b2 = self.betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")


def optimizer_apply(state: OptimizerState, params: list, grads: list | None = None):
    """Apply one update step to ``params`` (a list of ``(name, Tensor)``).

    ``grads`` defaults to each tensor's accumulated ``.grad``; a missing or
    NaN gradient raises :class:`NumericalError` naming the parameter.
    Returns ``params`` for convenience.
    """
    if grads is None:
        grads = [p.grad for _, p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    for (name, p), g in zip(params, grads):
        if g is None:
            raise NumericalError(f"no gradient recorded for parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if state.kind == "sgd":
            p.data -= state.lr * g
        else:
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            state.m[name] = m
            state.v[name] = v
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def zero_gradients(params: list) -> None:
    for _, p in params:
        p.grad = None

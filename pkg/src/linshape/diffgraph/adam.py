"""Adam with bias correction and per-parameter learning-rate multipliers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter update counts; bias correction uses these so parameters
    # unfrozen late in training get a proper first step
    t: dict = field(default_factory=dict)

    def reset(self, name):
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)


def adam_step(params, state: AdamState, lr: float, names=None, lr_scale=None):
    """One Adam update of ``names`` (default: every trainable parameter).

    ``lr_scale`` maps a parameter name to a multiplier of ``lr``.  Gradients
    are left untouched.
    """
    if names is None:
        names = [p.name for p in params if p.trainable]
    for name in names:
        g = params[name].grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}", where=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name in names:
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        else:
            v = state.v[name]
        t = state.t.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name], state.t[name] = m, v, t
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        step_lr = lr * (lr_scale(name) if callable(lr_scale) else (lr_scale or {}).get(name, 1.0))
        if step_lr == 0:
            continue
        p.value = p.value - step_lr * mhat / (np.sqrt(vhat) + state.eps)
        p.version += 1

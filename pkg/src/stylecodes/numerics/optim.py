"""Adam optimiser over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError, FrozenParameterError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


def adam_update(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam step, in place on ``params``.

    A step whose gradients contain NaN/Inf is skipped entirely: parameters
    and moments stay untouched, ``state.skipped`` is incremented and a
    warning record is appended.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param {params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        state.warnings.append({"step": state.step, "reason": "non-finite gradient"})
        return params, state
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params, state


class Adam:
    """Owns a set of trainable tensors and steps them from their ``.grad``."""

    def __init__(self, params: dict, lr: float = 1e-3, **kw):
        for name, p in params.items():
            if getattr(p, "frozen", False):
                raise FrozenParameterError(f"parameter {name!r} is frozen and cannot be optimised")
            if not isinstance(p, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")
        self.params = dict(params)
        for p in self.params.values():
            p.requires_grad = True
            p.zero_grad()
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def grads(self) -> dict:
        return {n: p.grad for n, p in self.params.items()}

    def step(self):
        adam_update(self.params, self.grads(), self.state)

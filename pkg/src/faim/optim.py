"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamWState:
    """Optimizer moments and hyperparameters for one parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: list[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros(p.shape) for p in params]
            self.v = [np.zeros(p.shape) for p in params]


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamWState):
    """One decoupled-weight-decay Adam step, updating params in place.

    Decay multiplies each parameter by (1 − lr·weight_decay) before the
    gradient step, so a zero-gradient parameter still shrinks by exactly
    that factor.  Parameters whose gradient is None are left untouched.
    """
    state.ensure(params)
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("params, grads, and moments must align")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m = state.m[i]
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state

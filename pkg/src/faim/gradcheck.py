"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure, deterministic scalar-valued function of ``x`` built
    from tape primitives.  Every real coordinate of ``x`` is perturbed by
    ``±eps`` (real and imaginary parts separately for complex tensors).  The
    error at a coordinate is ``|analytic − numeric| / max(|analytic|,
    |numeric|, 1e-12)``.
    """
    saved_flag = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            loss = f(x)
        grads = backward(tape, loss)
    finally:
        x.requires_grad = saved_flag
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    def eval_at(data: np.ndarray) -> float:
        return float(f(Tensor(data)).item())

    base = x.data
    worst = 0.0
    for idx in np.ndindex(*base.shape) if base.shape else [()]:
        parts = (1.0, 1j) if x.is_complex else (1.0,)
        for direction in parts:
            bumped = base.copy()
            bumped[idx] = bumped[idx] + eps * direction
            hi = eval_at(bumped)
            bumped = base.copy()
            bumped[idx] = bumped[idx] - eps * direction
            lo = eval_at(bumped)
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[idx]
            a_part = a.real if direction == 1.0 else a.imag
            err = abs(a_part - numeric) / max(abs(a_part), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst

"""Selective state-space recurrence and the interactive dual-branch block.

Each branch runs linear -> causal depthwise conv -> SiLU -> selective scan
-> layer norm.  The two branch outputs cross-gate each other under a shared
input gate, and a final short conv plus projection fuses them.

The scan itself is one fused tape primitive: the forward loop materializes
every state h_t, and the backward rule replays the recurrence in reverse.
This avoids recording ~10 tape nodes per token while keeping the gradient
exact (verified against finite differences and the unrolled recurrence).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import causal_conv1d, layer_norm, linear
from .rng import CounterRng
from .tensor import Tensor, add, concat, matmul, mul, neg, parameter, record, reshape, silu, softplus, texp


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def _phi1(u: np.ndarray) -> np.ndarray:
    """(exp(u) - 1)/u with the analytic limit 1 + u/2 near zero."""
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < 1e-8
    safe = np.where(small, 1.0, u)
    return np.where(small, 1.0 + 0.5 * u, np.expm1(safe) / safe)


def _phi1_deriv(u: np.ndarray) -> np.ndarray:
    """d/du of (exp(u)-1)/u = (exp(u)(u-1)+1)/u^2, series-stabilized near zero."""
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < 1e-4
    safe = np.where(small, 1.0, u)
    direct = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + u / 3.0 + u * u / 8.0
    return np.where(small, series, direct)


def discretize(A, B_t, delta_t):
    """Zero-order-hold discretization of a diagonal continuous system.

    A_bar = exp(delta*A); B_bar = (delta*A)^{-1} (exp(delta*A) - 1) * delta*B,
    evaluated elementwise with the series limit delta*B as delta*A -> 0.
    Operands must broadcast against each other.
    """
    A = np.asarray(A, dtype=np.float64)
    B_t = np.asarray(B_t, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    u = delta_t * A
    return np.exp(u), _phi1(u) * delta_t * B_t


# ---------------------------------------------------------------------------
# fused selective scan
# ---------------------------------------------------------------------------


def _scan_primitive(x: Tensor, delta: Tensor, b_proj: Tensor, c_proj: Tensor, a: Tensor) -> Tensor:
    """Recurrence y_t = C_t · h_t, h_t = exp(Δ_t A) ⊙ h_{t-1} + B̄_t ⊙ x_t.

    Shapes: x, delta [batch, Z, dim]; b_proj, c_proj [batch, Z, state];
    a [dim, state].  State is diagonal per (dim, state) pair.
    """
    xd, dd, bd, cd, ad = x.data, delta.data, b_proj.data, c_proj.data, a.data
    n_batch, n_tok, dim = xd.shape
    state = ad.shape[-1]

    u = dd[..., None] * ad
    abar = np.exp(u)
    phi = _phi1(u)
    states = np.empty((n_batch, n_tok, dim, state))
    h = np.zeros((n_batch, dim, state))
    for t in range(n_tok):
        bx = phi[:, t] * dd[:, t, :, None] * bd[:, t, None, :] * xd[:, t, :, None]
        h = abar[:, t] * h + bx
        states[:, t] = h
    y = np.einsum("bts,btds->btd", cd, states)
    out = Tensor(y)

    def rule(gs):
        gy = gs[0]
        d_c = np.einsum("btd,btds->bts", gy, states)
        d_x = np.empty_like(xd)
        d_delta = np.empty_like(dd)
        d_b = np.empty_like(bd)
        d_a = np.zeros_like(ad)
        dh = np.zeros((n_batch, dim, state))
        for t in range(n_tok - 1, -1, -1):
            dh += gy[:, t, :, None] * cd[:, t, None, :]
            h_prev = states[:, t - 1] if t > 0 else 0.0
            phit = phi[:, t]
            deltat = dd[:, t, :, None]
            bt = bd[:, t, None, :]
            xt = xd[:, t, :, None]
            common = dh * phit
            d_phi = dh * (deltat * bt * xt)
            du = dh * h_prev * abar[:, t] + d_phi * _phi1_deriv(u[:, t])
            d_delta[:, t] = (du * ad).sum(-1) + (common * bt * xt).sum(-1)
            d_a += (du * deltat).sum(0)
            d_b[:, t] = (common * deltat * xt).sum(1)
            d_x[:, t] = (common * deltat * bt).sum(-1)
            dh = dh * abar[:, t]
        return (d_x, d_delta, d_b, d_c, d_a)

    record((x, delta, b_proj, c_proj, a), (out,), rule)
    return out


@dataclass
class SsmParams:
    """Diagonal selective-SSM parameters for one branch."""

    a_log: Tensor
    w_b: Tensor
    w_c: Tensor
    w_delta: Tensor
    delta_bias: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.a_log, self.w_b, self.w_c, self.w_delta, self.delta_bias]


def init_ssm_params(dim: int, state: int, rng: CounterRng) -> SsmParams:
    # A = -exp(a_log) with a_log = log(1..state) keeps every mode decaying,
    # at rates spread across the token horizon.
    a_log = np.tile(np.log(np.arange(1, state + 1, dtype=np.float64)), (dim, 1))
    dt = np.exp(rng.uniform((dim,), np.log(1e-3), np.log(1e-1)))
    scale = 1.0 / np.sqrt(dim)
    return SsmParams(
        a_log=parameter(a_log),
        w_b=parameter(rng.normal((dim, state), std=scale)),
        w_c=parameter(rng.normal((dim, state), std=scale)),
        w_delta=parameter(rng.normal((dim, dim), std=scale)),
        delta_bias=parameter(np.log(np.expm1(dt))),
    )


def ssm_scan(params: SsmParams, x: Tensor) -> Tensor:
    """Selective scan over tokens; x is [..., Z, dim], output matches."""
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"ssm_scan expects [batch, tokens, dim] or [tokens, dim], got {x.shape}")
    b_proj = matmul(x, params.w_b)
    c_proj = matmul(x, params.w_c)
    delta = softplus(add(matmul(x, params.w_delta), params.delta_bias))
    a = neg(texp(params.a_log))
    y = _scan_primitive(x, delta, b_proj, c_proj, a)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


# ---------------------------------------------------------------------------
# interactive block
# ---------------------------------------------------------------------------


@dataclass
class ImbParams:
    in_w_1: Tensor
    in_b_1: Tensor
    in_w_2: Tensor
    in_b_2: Tensor
    gate_w: Tensor
    gate_b: Tensor
    conv_1: Tensor
    conv_1_bias: Tensor
    conv_2: Tensor
    conv_2_bias: Tensor
    ssm_1: SsmParams
    ssm_2: SsmParams
    ln_1_gamma: Tensor
    ln_1_beta: Tensor
    ln_2_gamma: Tensor
    ln_2_beta: Tensor
    conv_3: Tensor
    conv_3_bias: Tensor
    out_w: Tensor
    out_b: Tensor
    concat_fusion: bool = False
    share_in_proj: bool = False

    def parameters(self) -> list[Tensor]:
        out = [self.in_w_1, self.in_b_1]
        if not self.share_in_proj:
            out += [self.in_w_2, self.in_b_2]
        out += [
            self.gate_w,
            self.gate_b,
            self.conv_1,
            self.conv_1_bias,
            self.conv_2,
            self.conv_2_bias,
        ]
        out += self.ssm_1.parameters() + self.ssm_2.parameters()
        out += [
            self.ln_1_gamma,
            self.ln_1_beta,
            self.ln_2_gamma,
            self.ln_2_beta,
            self.conv_3,
            self.conv_3_bias,
            self.out_w,
            self.out_b,
        ]
        return out


def init_imb_params(
    dim: int,
    state: int,
    rng: CounterRng,
    k1: int = 2,
    k2: int = 4,
    k3: int = 1,
    concat_fusion: bool = False,
    share_in_proj: bool = False,
) -> ImbParams:
    scale = 1.0 / np.sqrt(dim)
    in_w_1 = parameter(rng.normal((dim, dim), std=scale))
    in_b_1 = parameter(np.zeros(dim))
    if share_in_proj:
        in_w_2, in_b_2 = in_w_1, in_b_1
    else:
        in_w_2 = parameter(rng.normal((dim, dim), std=scale))
        in_b_2 = parameter(np.zeros(dim))
    fuse_dim = 2 * dim if concat_fusion else dim
    return ImbParams(
        in_w_1=in_w_1,
        in_b_1=in_b_1,
        in_w_2=in_w_2,
        in_b_2=in_b_2,
        gate_w=parameter(rng.normal((dim, dim), std=scale)),
        gate_b=parameter(np.zeros(dim)),
        conv_1=parameter(rng.normal((k1, dim), std=1.0 / np.sqrt(k1))),
        conv_1_bias=parameter(np.zeros(dim)),
        conv_2=parameter(rng.normal((k2, dim), std=1.0 / np.sqrt(k2))),
        conv_2_bias=parameter(np.zeros(dim)),
        ssm_1=init_ssm_params(dim, state, rng.spawn("ssm1")),
        ssm_2=init_ssm_params(dim, state, rng.spawn("ssm2")),
        ln_1_gamma=parameter(np.ones(dim)),
        ln_1_beta=parameter(np.zeros(dim)),
        ln_2_gamma=parameter(np.ones(dim)),
        ln_2_beta=parameter(np.zeros(dim)),
        conv_3=parameter(rng.normal((k3, fuse_dim), std=1.0 / np.sqrt(k3))),
        conv_3_bias=parameter(np.zeros(fuse_dim)),
        out_w=parameter(rng.normal((fuse_dim, dim), std=1.0 / np.sqrt(fuse_dim))),
        out_b=parameter(np.zeros(dim)),
        concat_fusion=concat_fusion,
        share_in_proj=share_in_proj,
    )


def imb_branch(tokens: Tensor, branch_index: int, params: ImbParams) -> Tensor:
    """linear -> causal conv -> SiLU -> selective scan -> layer norm."""
    if branch_index == 1:
        w, b = params.in_w_1, params.in_b_1
        kernel, kbias = params.conv_1, params.conv_1_bias
        ssm, gamma, beta = params.ssm_1, params.ln_1_gamma, params.ln_1_beta
    elif branch_index == 2:
        w, b = params.in_w_2, params.in_b_2
        kernel, kbias = params.conv_2, params.conv_2_bias
        ssm, gamma, beta = params.ssm_2, params.ln_2_gamma, params.ln_2_beta
    else:
        raise ShapeError(f"branch_index must be 1 or 2, got {branch_index}")
    x = linear(tokens, w, b)
    x = causal_conv1d(x, kernel, kbias)
    x = silu(x)
    x = ssm_scan(ssm, x)
    return layer_norm(x, gamma, beta)


def imb_forward(tokens: Tensor, params: ImbParams) -> Tensor:
    """Cross-gated fusion of the two branches, then conv + projection."""
    gate = linear(tokens, params.gate_w, params.gate_b)
    h1 = imb_branch(tokens, 1, params)
    h2 = imb_branch(tokens, 2, params)
    fused_1 = mul(mul(silu(h1), h2), gate)
    fused_2 = mul(mul(silu(h2), h1), gate)
    if params.concat_fusion:
        fused = concat([fused_1, fused_2], axis=-1)
    else:
        fused = add(fused_1, fused_2)
    y = causal_conv1d(fused, params.conv_3, params.conv_3_bias)
    return linear(y, params.out_w, params.out_b)

"""Adaptive filtering block: FFT, soft band masks, learnable spectral
filters, integration, inverse FFT.

Three branches act on the token spectrum: a global filter over the full
spectrum, a local filter over the high band kept below theta_high, and a
local filter over the low band kept above theta_low.  Each filter is a
per-bin MLP over stacked real/imaginary parts whose complex output
multiplies the branch spectrum, so a frozen filter is exactly a circular
convolution in the time domain.  Branch outputs sum bin-wise before the
inverse transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .rng import CounterRng
from .spectral import (
    KEEP_ABOVE,
    KEEP_BELOW,
    BandMask,
    Spectrum,
    apply_mask,
    band_mask,
    irfft,
    rfft,
)
from .tensor import Tensor, add, concat, imag, make_complex, mul, narrow, parameter, real, relu
from .nn import linear


@dataclass
class PsiFilter:
    """Per-bin MLP producing one complex filter value per (bin, dim)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class AfbParams:
    theta_high: Tensor
    theta_low: Tensor
    psi_global: PsiFilter
    psi_high_local: PsiFilter
    psi_low_local: PsiFilter
    tau: float = 0.02
    literal_cross_pairing: bool = False

    def parameters(self) -> list[Tensor]:
        out = [self.theta_high, self.theta_low]
        for psi in (self.psi_global, self.psi_high_local, self.psi_low_local):
            out.extend(psi.parameters())
        return out


@dataclass
class LayerActivations:
    """Intermediates of one afb_forward call, retained for inspection."""

    spectrum: Spectrum = None
    mask_high: BandMask = None
    mask_low: BandMask = None
    high: Spectrum = None
    low: Spectrum = None
    filter_global: Tensor = None
    filter_high: Tensor = None
    filter_low: Tensor = None
    branch_global: Spectrum = None
    branch_high: Spectrum = None
    branch_low: Spectrum = None
    integrated: Spectrum = None


def init_psi_filter(dim: int, rng: CounterRng, hidden: int | None = None) -> PsiFilter:
    """Random near-zero filter; hidden width defaults to dim."""
    width = 2 * dim
    hidden = dim if hidden is None else hidden
    return PsiFilter(
        w1=parameter(rng.normal((width, hidden), std=1.0 / np.sqrt(width))),
        b1=parameter(np.zeros(hidden)),
        w2=parameter(rng.normal((hidden, width), std=1.0 / np.sqrt(hidden))),
        b2=parameter(np.zeros(width)),
    )


def init_afb_params(
    dim: int,
    rng: CounterRng,
    theta_high: float = 0.4,
    theta_low: float = 0.05,
    tau: float = 0.02,
    hidden: int | None = None,
    literal_cross_pairing: bool = False,
) -> AfbParams:
    return AfbParams(
        theta_high=parameter(theta_high),
        theta_low=parameter(theta_low),
        psi_global=init_psi_filter(dim, rng.spawn("psi_global"), hidden),
        psi_high_local=init_psi_filter(dim, rng.spawn("psi_high"), hidden),
        psi_low_local=init_psi_filter(dim, rng.spawn("psi_low"), hidden),
        tau=tau,
        literal_cross_pairing=literal_cross_pairing,
    )


def psi_filter_values(p: PsiFilter, s: Spectrum) -> Tensor:
    """Complex filter values g[..., k, d] computed from a spectrum."""
    bins = s.bins
    dim = bins.shape[-1]
    if p.w1.shape[0] != 2 * dim:
        raise ShapeError(f"filter expects width {p.w1.shape[0]}, spectrum has dim {dim}")
    stacked = concat([real(bins), imag(bins)], axis=-1)
    hidden = relu(linear(stacked, p.w1, p.b1))
    packed = linear(hidden, p.w2, p.b2)
    re = narrow(packed, packed.ndim - 1, 0, dim)
    im = narrow(packed, packed.ndim - 1, dim, dim)
    return make_complex(re, im)


def psi_apply(p: PsiFilter, s: Spectrum, target: Spectrum | None = None) -> Spectrum:
    """Multiply a spectrum by the complex filter computed from ``s``.

    ``target`` defaults to ``s`` itself; passing a different spectrum applies
    the filter values cross-wise (used by the literal cross-pairing variant).
    """
    if target is None:
        target = s
    g = psi_filter_values(p, s)
    return Spectrum(mul(g, target.bins), target.n_time)


def afb_forward(
    tokens: Tensor,
    params: AfbParams,
    use_high: bool = True,
    use_low: bool = True,
) -> tuple[Tensor, LayerActivations]:
    """Full adaptive filtering pass; output shape equals input shape.

    ``use_high`` / ``use_low`` drop the corresponding local branch entirely
    (the ablation variants); the global branch always participates.
    """
    acts = LayerActivations()
    acts.spectrum = rfft(tokens)
    acts.filter_global = psi_filter_values(params.psi_global, acts.spectrum)
    acts.branch_global = Spectrum(
        mul(acts.filter_global, acts.spectrum.bins), acts.spectrum.n_time
    )
    integrated_bins = acts.branch_global.bins

    if use_high or use_low:
        acts.mask_high = band_mask(acts.spectrum, params.theta_high, KEEP_BELOW, params.tau)
        acts.mask_low = band_mask(acts.spectrum, params.theta_low, KEEP_ABOVE, params.tau)
        acts.high = apply_mask(acts.spectrum, acts.mask_high)
        acts.low = apply_mask(acts.spectrum, acts.mask_low)
    if use_high:
        high_target = acts.low if params.literal_cross_pairing else acts.high
        acts.filter_high = psi_filter_values(params.psi_high_local, acts.high)
        acts.branch_high = Spectrum(mul(acts.filter_high, high_target.bins), high_target.n_time)
        integrated_bins = add(integrated_bins, acts.branch_high.bins)
    if use_low:
        acts.filter_low = psi_filter_values(params.psi_low_local, acts.low)
        acts.branch_low = Spectrum(mul(acts.filter_low, acts.low.bins), acts.low.n_time)
        integrated_bins = add(integrated_bins, acts.branch_low.bins)

    acts.integrated = Spectrum(integrated_bins, acts.spectrum.n_time)
    return irfft(acts.integrated), acts

"""Discrete Fourier machinery, soft frequency-band masks, and a
time-domain circular-convolution oracle.

The transform runs along the token axis: the second-to-last axis for inputs
shaped [..., tokens, dim], or axis 0 for plain 1-D vectors.  Power-of-two
lengths use an iterative radix-2 butterfly; every other length falls back to
a cached direct DFT matrix, which is fine at the token counts seen here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .tensor import COMPLEX, REAL, Tensor, as_tensor, mul, record, reshape, sigmoid, sub

# ---------------------------------------------------------------------------
# complex FFT core (plain ndarrays, last axis)
# ---------------------------------------------------------------------------

_REV_CACHE: dict[int, np.ndarray] = {}
_DFT_CACHE: dict[int, np.ndarray] = {}


def _bit_reversal(n: int) -> np.ndarray:
    perm = _REV_CACHE.get(n)
    if perm is None:
        levels = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.intp)
        for i in range(1, n):
            perm[i] = (perm[i >> 1] >> 1) | ((i & 1) << (levels - 1))
        _REV_CACHE[n] = perm
    return perm


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 DFT along the last axis; length must be a power of two."""
    n = x.shape[-1]
    if n & (n - 1):
        raise ShapeError(f"radix-2 transform needs a power-of-two length, got {n}")
    out = np.asarray(x, dtype=COMPLEX)[..., _bit_reversal(n)].copy()
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        upper = even + odd
        lower = even - odd
        blocks[..., :half] = upper
        blocks[..., half:] = lower
        size *= 2
    return out


def dft_direct(x: np.ndarray) -> np.ndarray:
    """Direct O(N^2) DFT along the last axis via a cached coefficient matrix."""
    n = x.shape[-1]
    mat = _DFT_CACHE.get(n)
    if mat is None:
        k = np.arange(n)
        mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
        _DFT_CACHE[n] = mat
    return np.asarray(x, dtype=COMPLEX) @ mat


def fft_full(x: np.ndarray) -> np.ndarray:
    """Forward DFT along the last axis, choosing the fast path when possible."""
    n = x.shape[-1]
    if n >= 2 and not (n & (n - 1)):
        return fft_radix2(x)
    return dft_direct(x)


def ifft_full(y: np.ndarray) -> np.ndarray:
    n = y.shape[-1]
    return np.conj(fft_full(np.conj(y))) / n


def _half_bins(n_time: int) -> int:
    return n_time // 2 + 1


def _rfft_last(x: np.ndarray) -> np.ndarray:
    return fft_full(x)[..., : _half_bins(x.shape[-1])]


def _extend_hermitian(half: np.ndarray, n_time: int) -> np.ndarray:
    k = _half_bins(n_time)
    tail = np.conj(half[..., 1 : n_time - k + 1][..., ::-1])
    return np.concatenate([half, tail], axis=-1)


def _irfft_last(half: np.ndarray, n_time: int) -> np.ndarray:
    # Imaginary parts of the DC (and Nyquist, for even lengths) bins do not
    # influence the real reconstruction: they invert to purely imaginary
    # sequences that the final real-part projection removes.
    full = _extend_hermitian(half, n_time)
    return np.ascontiguousarray(ifft_full(full).real)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class Spectrum:
    """Half-spectrum of a real signal plus the original token count."""

    bins: Tensor
    n_time: int

    def __post_init__(self):
        axis = 0 if self.bins.ndim == 1 else self.bins.ndim - 2
        if self.bins.shape[axis] != _half_bins(self.n_time):
            raise ShapeError(
                f"{self.bins.shape[axis]} bins inconsistent with n_time={self.n_time}"
            )


@dataclass
class BandMask:
    """Soft per-bin keep weights from a sigmoid threshold on normalized frequency."""

    values: Tensor
    threshold: Tensor
    direction: str
    temperature: float


# ---------------------------------------------------------------------------
# differentiable transforms
# ---------------------------------------------------------------------------


def _token_axis(ndim: int) -> int:
    return 0 if ndim == 1 else ndim - 2


def rfft(x: Tensor) -> Spectrum:
    """Real-input DFT along the token axis, keeping the non-redundant half."""
    if x.is_complex:
        raise TypeError("rfft expects a real tensor")
    axis = _token_axis(x.ndim)
    n_time = x.shape[axis]
    moved = np.moveaxis(x.data, axis, -1)
    half = np.moveaxis(_rfft_last(moved), -1, axis)
    out = Tensor(half)

    def rule(gs):
        g = np.moveaxis(gs[0], axis, -1)
        pad = np.zeros(g.shape[:-1] + (n_time - g.shape[-1],), dtype=COMPLEX)
        g_full = np.concatenate([np.conj(g), pad], axis=-1)
        dx = np.ascontiguousarray(fft_full(g_full).real)
        return (np.moveaxis(dx, -1, axis),)

    record((x,), (out,), rule)
    return Spectrum(out, n_time)


def irfft(s: Spectrum) -> Tensor:
    """Inverse of :func:`rfft`; recovers exactly ``n_time`` real tokens."""
    bins = s.bins
    n_time = s.n_time
    axis = _token_axis(bins.ndim)
    moved = np.moveaxis(bins.data, axis, -1)
    x = np.moveaxis(_irfft_last(moved, n_time), -1, axis)
    out = Tensor(x)
    k = _half_bins(n_time)

    def rule(gs):
        g = np.moveaxis(gs[0], axis, -1).astype(COMPLEX)
        spec = fft_full(g)[..., :k]
        weights = np.full(k, 2.0 / n_time)
        weights[0] = 1.0 / n_time
        if n_time % 2 == 0:
            weights[-1] = 1.0 / n_time
        return (np.moveaxis(spec * weights, -1, axis),)

    record((bins,), (out,), rule)
    return out


# ---------------------------------------------------------------------------
# band masks
# ---------------------------------------------------------------------------

KEEP_BELOW = "keep-below"
KEEP_ABOVE = "keep-above"


def band_mask(s: Spectrum, theta, direction: str, tau: float = 0.02) -> BandMask:
    """Soft threshold mask over normalized frequencies f_k = k / n_time."""
    if tau <= 0:
        raise InputError(f"mask temperature must be positive, got {tau}")
    theta = as_tensor(theta)
    k = _half_bins(s.n_time)
    freqs = Tensor(np.arange(k, dtype=REAL) / s.n_time)
    if direction == KEEP_BELOW:
        logits = sub(theta, freqs)
    elif direction == KEEP_ABOVE:
        logits = sub(freqs, theta)
    else:
        raise InputError(f"unknown mask direction {direction!r}")
    values = sigmoid(mul(logits, as_tensor(1.0 / tau)))
    return BandMask(values, theta, direction, tau)


def apply_mask(s: Spectrum, m: BandMask) -> Spectrum:
    """Scale each frequency bin by its keep weight."""
    bins = s.bins
    k = m.values.shape[0]
    axis = _token_axis(bins.ndim)
    if bins.shape[axis] != k:
        raise ShapeError(f"mask has {k} bins but spectrum has {bins.shape[axis]}")
    weights = m.values if bins.ndim == 1 else reshape(m.values, (k, 1))
    return Spectrum(mul(bins, weights), s.n_time)


# ---------------------------------------------------------------------------
# time-domain oracle
# ---------------------------------------------------------------------------


def circular_convolve(x, h) -> np.ndarray:
    """Brute-force circular convolution: y[n] = sum_m x[m] h[(n-m) mod N]."""
    x = np.asarray(x, dtype=REAL)
    h = np.asarray(h, dtype=REAL)
    if x.ndim != 1 or h.ndim != 1 or x.shape != h.shape:
        raise ShapeError(f"circular_convolve needs equal-length vectors, got {x.shape} and {h.shape}")
    n = x.shape[0]
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return (x[None, :] * h[idx]).sum(axis=-1)

"""Radix-2 FFT core: forward/inverse transforms and circular convolution/correlation.

All transforms run along the last axis, so a 2D array is treated as a batch of
rows and transformed in one vectorized pass. Lengths must be powers of two;
callers that need other sizes zero-pad before reaching this module. Everything
is computed in double precision.
"""

from __future__ import annotations

import threading
import warnings

import numpy as np

# Imaginary residue left over when extracting a real result from the inverse
# transform. Residue above the warn level indicates unusual conditioning;
# above the error level the result cannot be trusted.
IMAG_RESIDUE_WARN = 1e-9
IMAG_RESIDUE_ERROR = 1e-6


class FFTSizeError(ValueError):
    """Transform length is not a power of two."""


class SpectralResidueError(ArithmeticError):
    """Imaginary residue of a real-valued result exceeded the error threshold."""


_plan_lock = threading.Lock()
_plans: dict[int, tuple[np.ndarray, list[np.ndarray]]] = {}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(1, n):
        rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (bits - 1))
    return rev


def _plan(n: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Bit-reversal permutation and per-stage twiddle tables, cached per size.

    The cache is shared across threads; concurrent first use may build the
    same plan twice, and the duplicate store is harmless (first-writer-wins).
    """
    plan = _plans.get(n)
    if plan is not None:
        return plan
    rev = _bit_reverse_indices(n)
    stages = []
    m = 2
    while m <= n:
        half = m >> 1
        stages.append(np.exp(-2j * np.pi * np.arange(half) / m))
        m <<= 1
    with _plan_lock:
        _plans.setdefault(n, (rev, stages))
    return _plans[n]


def fft(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT along the last axis: X_k = sum_j x_j e^{-2pi i jk/n}."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise FFTSizeError(f"transform length {n} is not a power of two")
    rev, stages = _plan(n)
    y = np.ascontiguousarray(x[..., rev], dtype=np.complex128)
    batch = y.shape[:-1]
    m = 2
    for w in stages:
        half = m >> 1
        blocks = y.reshape(*batch, n // m, m)
        t = blocks[..., half:] * w
        u = blocks[..., :half].copy()
        blocks[..., :half] = u + t
        blocks[..., half:] = u - t
        m <<= 1
    return y


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse DFT along the last axis, with 1/n normalization."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    return np.conj(fft(np.conj(x))) / n


def _real_part(y: np.ndarray, context: str) -> np.ndarray:
    residue = float(np.max(np.abs(y.imag))) if y.size else 0.0
    if residue >= IMAG_RESIDUE_ERROR:
        raise SpectralResidueError(
            f"{context}: imaginary residue {residue:.3e} exceeds {IMAG_RESIDUE_ERROR:.0e}"
        )
    if residue >= IMAG_RESIDUE_WARN:
        warnings.warn(
            f"{context}: imaginary residue {residue:.3e} above {IMAG_RESIDUE_WARN:.0e}",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.ascontiguousarray(y.real)


def _check_compatible(c: np.ndarray, x: np.ndarray) -> None:
    if c.shape[-1] != x.shape[-1]:
        raise ValueError(f"length mismatch: {c.shape[-1]} vs {x.shape[-1]}")
    if not _is_pow2(x.shape[-1]):
        raise FFTSizeError(f"length {x.shape[-1]} is not a power of two")


def circular_convolve(c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Circular convolution (c * x)_i = sum_j c_{(i-j) mod n} x_j via the Fourier domain.

    `c` may be a single kernel applied to a batch of rows `x`, or match `x`
    row for row.
    """
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_compatible(c, x)
    y = ifft(fft(c) * fft(x))
    return _real_part(y, "circular_convolve")


def circular_correlate(c: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Circular correlation: multiplication by the transpose of circ(c).

    Returns F^{-1}(conj(F(c)) . F(g)), i.e. C^T g for C = circ(c).
    """
    c = np.asarray(c, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_compatible(c, g)
    y = ifft(np.conj(fft(c)) * fft(g))
    return _real_part(y, "circular_correlate")

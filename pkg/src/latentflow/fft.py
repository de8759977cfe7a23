"""FFT utilities for the spectral solvers and spectrum diagnostics.

Transforms accept real input and return the full complex spectrum; the
inverse returns the real part after the round trip. Lengths along every
transformed axis must be powers of two, which the spectral solvers and the
radial-spectrum binning rely on.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _as_ndarray(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _check_pow2(n: int, axis: int):
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"fft: length {n} along axis {axis} is not a power of two")


def fft_real(x, axis: int = -1) -> np.ndarray:
    """Full complex spectrum of a real signal along `axis`."""
    arr = _as_ndarray(x)
    _check_pow2(arr.shape[axis], axis)
    return np.fft.fft(arr, axis=axis)


def ifft_real(spectrum, axis: int = -1) -> np.ndarray:
    """Inverse of `fft_real`; returns the real part."""
    spectrum = np.asarray(spectrum)
    _check_pow2(spectrum.shape[axis], axis)
    return np.fft.ifft(spectrum, axis=axis).real


def fft2_real(x, axes=(-2, -1)) -> np.ndarray:
    """Full complex 2D spectrum of a real field."""
    arr = _as_ndarray(x)
    for ax in axes:
        _check_pow2(arr.shape[ax], ax)
    return np.fft.fft2(arr, axes=axes)


def ifft2_real(spectrum, axes=(-2, -1)) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    for ax in axes:
        _check_pow2(spectrum.shape[ax], ax)
    return np.fft.ifft2(spectrum, axes=axes).real

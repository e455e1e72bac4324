"""2-D discrete Fourier transforms and amplitude/phase decomposition.

The fast path is an iterative radix-2 Cooley-Tukey transform vectorised over
all leading axes. Lengths that are not powers of two go through Bluestein's
chirp-z algorithm, which re-uses the radix-2 kernel on a padded convolution.

Images are ``(H, W, C)`` float32 arrays; spectra are ``(H, W, C)`` complex128.
Zero frequency sits at index ``(0, 0)``; use :func:`fftshift2` when a centred
layout is needed.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError, InvariantError

BRUTEFORCE_MAX = 32


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bitrev(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m, s):
    return np.exp(-2j * np.pi * np.arange(m) / s)


def _fft_pow2(x):
    """Forward DFT along the last axis; length must be a power of two."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = x[..., _bitrev(n)].astype(np.complex128)
    m = 1
    while m < n:
        s = 2 * m
        y = y.reshape(lead + (n // s, 2, m))
        a = y[..., 0, :]
        b = y[..., 1, :] * _twiddles(m, s)
        y = np.stack((a + b, a - b), axis=-2)
        m = s
    return y.reshape(lead + (n,))


@lru_cache(maxsize=None)
def _bluestein_kernel(n):
    m = 1 << (2 * n - 2).bit_length()
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * (k * k % (2 * n)) / n)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    return m, chirp, _fft_pow2(b)


def _fft_any(x):
    n = x.shape[-1]
    if _is_pow2(n):
        return _fft_pow2(x)
    m, chirp, fb = _bluestein_kernel(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    conv = _ifft_any(_fft_pow2(a) * fb)
    return conv[..., :n] * chirp


def _ifft_any(x):
    n = x.shape[-1]
    return np.conj(_fft_any(np.conj(x))) / n


def _check_plane(x):
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise DimensionError(f"expected a non-empty 2-D plane, got shape {x.shape}")
    return x


def fft2(x):
    """Unnormalised forward 2-D DFT over the first two axes.

    Extra trailing axes (colour channels) are transformed independently.
    """
    x = _check_plane(x)
    moved = np.moveaxis(x, (0, 1), (-2, -1))
    out = _fft_any(_fft_any(moved).swapaxes(-1, -2)).swapaxes(-1, -2)
    return np.moveaxis(out, (-2, -1), (0, 1))


def ifft2(spec):
    """Inverse of :func:`fft2` (carries the 1/(H*W) factor)."""
    spec = _check_plane(spec)
    moved = np.moveaxis(spec, (0, 1), (-2, -1))
    out = _ifft_any(_ifft_any(moved).swapaxes(-1, -2)).swapaxes(-1, -2)
    return np.moveaxis(out, (-2, -1), (0, 1))


def dft2_bruteforce(plane):
    """Textbook O(H^2 W^2) DFT of a single 2-D plane. Test oracle only."""
    plane = np.asarray(plane, dtype=np.float64) if not np.iscomplexobj(plane) else np.asarray(plane)
    if plane.ndim != 2 or 0 in plane.shape:
        raise DimensionError(f"expected a non-empty 2-D plane, got shape {plane.shape}")
    h, w = plane.shape
    if h > BRUTEFORCE_MAX or w > BRUTEFORCE_MAX:
        raise DimensionError(f"brute-force DFT refuses {h}x{w} (limit {BRUTEFORCE_MAX})")
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            phase = -2.0 * np.pi * (u * ys / h + v * xs / w)
            out[u, v] = np.sum(plane * np.exp(1j * phase))
    return out


@dataclass(frozen=True)
class Spectrum:
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def shape(self):
        return self.amplitude.shape


def to_amp_phase(spec):
    """Split a complex spectrum into modulus and argument.

    Zero bins get phase 0 (numpy's ``angle`` convention for ``0+0j``).
    """
    spec = np.asarray(spec)
    return Spectrum(np.abs(spec), np.angle(spec))


def recompose(spectrum):
    amp = np.asarray(spectrum.amplitude)
    if np.any(amp < 0):
        raise InvariantError("amplitude must be nonnegative")
    return amp * np.exp(1j * np.asarray(spectrum.phase))


def fftshift2(x):
    """Move the zero-frequency bin to the centre (floor(H/2), floor(W/2))."""
    return np.roll(x, (x.shape[0] // 2, x.shape[1] // 2), axis=(0, 1))


def ifftshift2(x):
    return np.roll(x, (-(x.shape[0] // 2), -(x.shape[1] // 2)), axis=(0, 1))


def energy(x):
    """Sum of squared magnitudes, accumulated in float64."""
    x = np.asarray(x)
    return float(np.sum(np.abs(x.astype(np.complex128)) ** 2))

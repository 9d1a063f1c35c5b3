"""IQ frames to standardized multichannel STFT examples, plus channel masking.

Layout conventions:

* an IQ frame is ``[A, L, 2]`` real (antenna, sample, re/im);
* an STFT example is ``[2A, T, F]`` real, channel ``2k`` holding the real part
  and ``2k + 1`` the imaginary part of antenna ``k``'s STFT, so masking one
  antenna zeroes two adjacent channels.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateExampleWarning, ParameterError, ShapeError

STD_FLOOR = 1e-12


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window ``0.5 * (1 - cos(2 pi i / n))``."""
    if n < 2:
        raise ParameterError(f"Hann window length must be >= 2, got {n}")
    i = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / n))


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def direct_dft(x) -> np.ndarray:
    """O(n^2) DFT along the last axis, ``X[k] = sum_m x[m] exp(-2j pi k m / n)``."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    # reduce k*m mod n first so the phase argument stays small and exact
    basis = np.exp(-2j * np.pi * (np.outer(k, k) % n) / n)
    return x @ basis.T


def dft(x) -> np.ndarray:
    """Unnormalized forward DFT along the last axis.

    Power-of-two lengths use an iterative radix-2 decimation-in-time FFT,
    vectorized across all leading axes; other lengths fall back to
    :func:`direct_dft`.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        return direct_dft(x)
    lead = x.shape[:-1]
    a = x.reshape(-1, n)[:, _bit_reverse(n)].copy()
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[0], n // size, size)
        even = a[:, :, :half]
        odd = a[:, :, half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=2)
        size *= 2
    return a.reshape(lead + (n,))


def iq_to_complex(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 2:
        raise ShapeError(f"IQ frame must be [A, L, 2], got {frame.shape}")
    return frame[..., 0].astype(np.float64) + 1j * frame[..., 1].astype(np.float64)


def frame_to_stft(frame, n_chunks: int, n_bins: int) -> np.ndarray:
    """Non-overlapping Hann-windowed STFT of an ``[A, L, 2]`` frame.

    Returns the unstandardized ``[2A, T, F]`` float64 example.
    """
    z = iq_to_complex(frame)
    a, length = z.shape
    if length % n_bins != 0:
        raise ShapeError(f"frame length {length} is not divisible by {n_bins} bins")
    if length != n_chunks * n_bins:
        raise ShapeError(f"frame length {length} != {n_chunks} chunks x {n_bins} bins")
    spec = dft(z.reshape(a, n_chunks, n_bins) * hann_window(n_bins))
    out = np.empty((2 * a, n_chunks, n_bins), dtype=np.float64)
    out[0::2] = spec.real
    out[1::2] = spec.imag
    return out


def standardize(x) -> np.ndarray:
    """Zero-mean, unit-variance over every element (population std).

    A constant input maps to zeros with a :class:`DegenerateExampleWarning`.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ParameterError("standardize: input contains non-finite values")
    mu = x.mean()
    sd = x.std()
    if sd == 0.0:
        warnings.warn("standardize: constant example, returning zeros", DegenerateExampleWarning, stacklevel=2)
    return (x - mu) / (sd + STD_FLOOR)


def preprocess_frames(frames, n_chunks: int, dtype=np.float32) -> np.ndarray:
    """``[M, A, L, 2]`` IQ frames to standardized ``[M, 2A, T, L/T]`` examples."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ShapeError(f"expected [frames, A, L, 2], got {frames.shape}")
    length = frames.shape[2]
    if length % n_chunks:
        raise ShapeError(f"frame length {length} is not divisible by {n_chunks} chunks")
    n_bins = length // n_chunks
    out = np.empty((frames.shape[0], 2 * frames.shape[1], n_chunks, n_bins), dtype=dtype)
    for i, frame in enumerate(frames):
        out[i] = standardize(frame_to_stft(frame, n_chunks, n_bins))
    return out


@dataclass
class MaskedExample:
    input: np.ndarray
    target: np.ndarray
    masked_antenna: int


def mask_channels(x, antenna: int) -> MaskedExample:
    """Zero antenna ``antenna``'s real/imag channel pair in a copy of ``x: [2A, T, F]``."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] % 2:
        raise ShapeError(f"expected an example of shape [2A, T, F], got {x.shape}")
    n_ant = x.shape[0] // 2
    if not 0 <= antenna < n_ant:
        raise ParameterError(f"antenna index {antenna} out of range [0, {n_ant})")
    masked = x.copy()
    masked[2 * antenna : 2 * antenna + 2] = 0
    return MaskedExample(masked, x, int(antenna))


def mask_batch(x, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mask one uniformly drawn antenna per example of ``x: [N, 2A, T, F]``.

    Returns ``(masked_inputs, targets, antennas)``; ``targets`` is ``x`` itself.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] % 2:
        raise ShapeError(f"expected a batch of shape [N, 2A, T, F], got {x.shape}")
    antennas = rng.integers(0, x.shape[1] // 2, size=x.shape[0])
    masked = x.copy()
    for i, k in enumerate(antennas):
        masked[i, 2 * k : 2 * k + 2] = 0
    return masked, x, antennas

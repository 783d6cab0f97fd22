"""Spectral augmentations for EEG segments: FT surrogate, bandstop and frequency shift.

Segments are time-major (T, C) real arrays; every transform acts along time,
channel by channel, and returns a new array of the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AUG_METHODS = ("ft-surrogate", "bandstop", "freq-shift")
DEFAULT_NOTCH_WIDTH = 2.0
DEFAULT_MAX_SHIFT = 2.0
DEFAULT_AUG_PROB = 0.5


@dataclass(frozen=True, eq=False)
class Spectrum:
    coeffs: np.ndarray  # (T, C) complex
    sample_rate: float

    def freqs(self) -> np.ndarray:
        return np.fft.fftfreq(len(self.coeffs), d=1.0 / self.sample_rate)

    def is_conjugate_symmetric(self, atol: float = 1e-9) -> bool:
        c = self.coeffs
        mirrored = np.conj(np.roll(c[::-1], 1, axis=0))
        return bool(np.allclose(c, mirrored, rtol=0, atol=atol * max(1.0, np.abs(c).max(initial=0))))


def dft(segment, sample_rate: float = 1.0) -> Spectrum:
    x = np.asarray(segment, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("segment contains NaN or Inf")
    return Spectrum(np.fft.fft(x, axis=0), float(sample_rate))


def idft(spectrum: Spectrum) -> np.ndarray:
    """Inverse transform; returns the real part (exact for conjugate-symmetric input)."""
    return np.fft.ifft(spectrum.coeffs, axis=0).real


def _as_segment(segment) -> np.ndarray:
    x = np.asarray(segment, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"segment must be (T, C), got shape {x.shape}")
    return x


def ft_surrogate(segment, rng: np.random.Generator, channel_independent: bool = True) -> np.ndarray:
    """Rotate every positive-frequency coefficient by a uniform random phase.

    Magnitudes are untouched; DC and (for even T) Nyquist stay real so the
    output is real.  With ``channel_independent=False`` one phase per bin is
    shared by all channels, preserving cross-channel phase differences.
    """
    x = _as_segment(segment)
    t, c = x.shape
    spec = np.fft.rfft(x, axis=0)
    n_free = (t - 1) // 2  # bins strictly between DC and Nyquist
    shape = (n_free, c) if channel_independent else (n_free, 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, shape)
    spec[1:1 + n_free] *= np.exp(1j * phases)
    return np.fft.irfft(spec, n=t, axis=0).reshape(np.shape(segment))


def notch_bins(t: int, fs: float, f0: float, bandwidth: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(t, d=1.0 / fs)
    return np.flatnonzero(np.abs(freqs - f0) <= bandwidth / 2)


def bandstop_filter(segment, f0: float | None = None, bandwidth: float = DEFAULT_NOTCH_WIDTH,
                    fs: float = 250.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Brick-wall notch: zero every bin whose centre lies within ``bandwidth/2`` of ``f0``.

    If ``f0`` is None it is drawn uniformly from [1, fs/2 - 1] using ``rng``.
    """
    x = _as_segment(segment)
    nyq = fs / 2
    if f0 is None:
        if rng is None:
            raise ValueError("need f0 or an rng to draw it")
        f0 = rng.uniform(1.0, nyq - 1.0)
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    if not (0 < f0 < nyq) or f0 - bandwidth / 2 < 0 or f0 + bandwidth / 2 > nyq:
        raise ValueError(f"band {f0} +/- {bandwidth / 2} Hz falls outside [0, {nyq}] Hz")
    bins = notch_bins(len(x), fs, f0, bandwidth)
    if bins.size == 0:
        return np.array(segment, dtype=np.float64, copy=True)
    spec = np.fft.rfft(x, axis=0)
    spec[bins] = 0.0
    return np.fft.irfft(spec, n=len(x), axis=0).reshape(np.shape(segment))


def analytic_signal(segment) -> np.ndarray:
    x = _as_segment(segment)
    t = len(x)
    h = np.zeros(t)
    h[0] = 1.0
    if t % 2 == 0:
        h[t // 2] = 1.0
        h[1:t // 2] = 2.0
    else:
        h[1:(t + 1) // 2] = 2.0
    return np.fft.ifft(np.fft.fft(x, axis=0) * h[:, None], axis=0)


def frequency_shift(segment, delta_f: float, fs: float = 250.0) -> np.ndarray:
    """Shift every spectral component by ``delta_f`` Hz via analytic-signal modulation."""
    z = analytic_signal(segment)
    t = np.arange(len(z)) / fs
    return (z * np.exp(2j * np.pi * delta_f * t)[:, None]).real.reshape(np.shape(segment))


def augment_one(method: str, segment, rng: np.random.Generator, fs: float) -> np.ndarray:
    """One random draw of the named augmentation with its default parameters."""
    if method == "ft-surrogate":
        return ft_surrogate(segment, rng, channel_independent=True)
    if method == "bandstop":
        return bandstop_filter(segment, None, DEFAULT_NOTCH_WIDTH, fs, rng)
    if method == "freq-shift":
        return frequency_shift(segment, rng.uniform(-DEFAULT_MAX_SHIFT, DEFAULT_MAX_SHIFT), fs)
    raise ValueError(f"unknown augmentation {method!r}; expected one of {AUG_METHODS}")


def augment_batch(method: str, batch, rngs, fs: float, prob: float = DEFAULT_AUG_PROB) -> np.ndarray:
    """Augment each row with probability ``prob``; row ``i`` draws only from ``rngs[i]``."""
    batch = np.asarray(batch, dtype=np.float64)
    out = batch.copy()
    for i, rng in enumerate(rngs):
        if rng.uniform() < prob:
            out[i] = augment_one(method, batch[i], rng, fs)
    return out

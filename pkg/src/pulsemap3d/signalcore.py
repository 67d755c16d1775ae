"""Time-series primitives: detrending, band filtering, spectra and analytic signals.

Every function is pure. The ``*_array`` variants operate along the last axis of
an ndarray so that per-pixel stacks can be processed in one call; the typed
wrappers validate the signal invariants and are what callers normally use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from .errors import (
    DegenerateReference,
    InvalidBand,
    NonPositiveBaseline,
    TooShort,
    ValidationError,
)

FILTER_ORDER = 4
DEFAULT_PAD_FACTOR = 4
TRANSIENT_S = 1.0


def _check_samples(x: np.ndarray, fs: float, min_len: int = 2) -> None:
    if not fs > 0:
        raise ValidationError(f"sample rate must be positive, got {fs}")
    if x.shape[-1] < min_len:
        raise TooShort(f"need at least {min_len} samples, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("signal contains non-finite samples")


@dataclass(frozen=True)
class ScalarSignal:
    samples: np.ndarray
    fs: float
    # samples inside the first/last second of a filtered segment
    low_confidence: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValidationError("ScalarSignal must be one-dimensional")
        _check_samples(x, self.fs)
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) / self.fs


@dataclass(frozen=True)
class RgbSignal:
    """Spatially averaged colour trace, shape ``(n, 3)`` in r, g, b order."""

    samples: np.ndarray
    fs: float

    def __post_init__(self) -> None:
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ValidationError(f"RgbSignal needs shape (n, 3), got {x.shape}")
        _check_samples(x.T, self.fs)
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def channel(self, c: int) -> ScalarSignal:
        return ScalarSignal(self.samples[:, c], self.fs)


@dataclass(frozen=True)
class AnalyticSignal:
    samples: np.ndarray
    fs: float

    def __post_init__(self) -> None:
        z = np.asarray(self.samples, dtype=np.complex128)
        if z.ndim != 1:
            raise ValidationError("AnalyticSignal must be one-dimensional")
        if not np.all(np.isfinite(z)):
            raise ValidationError("analytic signal contains non-finite samples")
        object.__setattr__(self, "samples", z)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def real(self) -> ScalarSignal:
        return ScalarSignal(self.samples.real.copy(), self.fs)


@dataclass(frozen=True)
class Spectrum:
    """One-sided FFT of a mean-removed, zero-padded signal.

    ``bins[j]`` is the complex amplitude at ``j * freq_resolution`` Hz.
    """

    bins: np.ndarray
    freq_resolution: float
    fs: float

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.bins.shape[-1]) * self.freq_resolution

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.bins) ** 2

    def band(self, lo_hz: float, hi_hz: float) -> np.ndarray:
        f = self.freqs
        return (f >= lo_hz) & (f <= hi_hz)


# --------------------------------------------------------------------------
# filter design (cached: the same few designs are reused for every pixel)


@lru_cache(maxsize=64)
def lowpass_sos(cutoff_hz: float, fs: float, order: int = FILTER_ORDER) -> np.ndarray:
    if not 0 < cutoff_hz < fs / 2:
        raise InvalidBand(f"cutoff {cutoff_hz} Hz outside (0, {fs / 2}) Hz")
    return sps.butter(order, cutoff_hz, btype="low", fs=fs, output="sos")


@lru_cache(maxsize=64)
def bandpass_sos(lo_hz: float, hi_hz: float, fs: float, order: int = FILTER_ORDER) -> np.ndarray:
    if not 0 < lo_hz < hi_hz < fs / 2:
        raise InvalidBand(f"band ({lo_hz}, {hi_hz}) Hz invalid for fs={fs} Hz")
    return sps.butter(order, [lo_hz, hi_hz], btype="band", fs=fs, output="sos")


def transient_mask(n: int, fs: float, edge_s: float = TRANSIENT_S) -> np.ndarray:
    """Boolean mask marking samples within ``edge_s`` of either end."""
    m = np.zeros(n, dtype=bool)
    e = min(int(round(edge_s * fs)), n)
    m[:e] = True
    m[n - e:] = True
    return m


# --------------------------------------------------------------------------
# array-level kernels (last axis is time)


def lowpass_array(x: np.ndarray, fs: float, cutoff_hz: float) -> np.ndarray:
    return sps.sosfiltfilt(lowpass_sos(float(cutoff_hz), float(fs)), x, axis=-1)


def detrend_normalize_array(x: np.ndarray, fs: float, cutoff_hz: float = 0.4) -> np.ndarray:
    """Relative deviation from the slow baseline, ``(x - lp) / lp``.

    Raises:
        NonPositiveBaseline: if the lowpass baseline is not strictly positive.
    """
    lp = lowpass_array(x, fs, cutoff_hz)
    if not np.all(lp > 0):
        raise NonPositiveBaseline("lowpass baseline must be strictly positive")
    return (x - lp) / lp


def bandpass_array(x: np.ndarray, fs: float, lo_hz: float, hi_hz: float) -> np.ndarray:
    return sps.sosfiltfilt(bandpass_sos(float(lo_hz), float(hi_hz), float(fs)), x, axis=-1)


def padded_length(n: int, pad_factor: int = DEFAULT_PAD_FACTOR) -> int:
    if pad_factor < 1:
        raise ValidationError(f"pad_factor must be >= 1, got {pad_factor}")
    return pad_factor * (1 << max(int(n) - 1, 0).bit_length())


def spectrum_array(x: np.ndarray, pad_factor: int = DEFAULT_PAD_FACTOR) -> tuple[np.ndarray, int]:
    """rfft of mean-removed ``x`` zero-padded along the last axis.

    Returns the complex bins and the padded length.
    """
    nfft = padded_length(x.shape[-1], pad_factor)
    xc = x - x.mean(axis=-1, keepdims=True)
    return np.fft.rfft(xc, n=nfft, axis=-1), nfft


# --------------------------------------------------------------------------
# typed operations


def detrend_normalize(s: ScalarSignal, cutoff_hz: float = 0.4) -> ScalarSignal:
    """Normalise a positive intensity trace by its 0.4 Hz lowpass baseline.

    The returned signal is dimensionless and invariant to a global gain on
    ``s``. Samples in the first and last second carry filter transients and
    are flagged in ``low_confidence`` rather than trimmed.
    """
    if not 0 < cutoff_hz < s.fs / 2:
        raise InvalidBand(f"cutoff {cutoff_hz} Hz outside (0, {s.fs / 2}) Hz")
    out = detrend_normalize_array(s.samples, s.fs, cutoff_hz)
    return ScalarSignal(out, s.fs, low_confidence=transient_mask(len(s), s.fs))


def bandpass(s: ScalarSignal, lo_hz: float, hi_hz: float) -> ScalarSignal:
    """Zero-phase Butterworth bandpass (order 4, applied forward and backward)."""
    if not 0 < lo_hz < hi_hz < s.fs / 2:
        raise InvalidBand(f"band ({lo_hz}, {hi_hz}) Hz invalid for fs={s.fs} Hz")
    out = bandpass_array(s.samples, s.fs, lo_hz, hi_hz)
    return ScalarSignal(out, s.fs, low_confidence=transient_mask(len(s), s.fs))


def analytic(s: ScalarSignal) -> AnalyticSignal:
    """FFT-based analytic signal; the imaginary part is the Hilbert transform."""
    if len(s) < 8:
        raise TooShort(f"analytic signal needs >= 8 samples, got {len(s)}")
    return AnalyticSignal(sps.hilbert(s.samples), s.fs)


def reference_scale(z: np.ndarray) -> complex:
    """Complex factor ``a`` such that ``sum(Re(a*z) * a*z) == 1``.

    Writing ``x, y`` for the real and imaginary parts of ``a*z``, the condition
    is ``sum(x**2) == 1`` and ``sum(x*y) == 0``. Among the rotations that make
    the two parts orthogonal the one closest to zero is used, so an input whose
    parts are already orthogonal (any FFT-based analytic signal) is only scaled
    by a positive real.
    """
    x, y = z.real, z.imag
    sxx = float(np.dot(x, x))
    syy = float(np.dot(y, y))
    sxy = float(np.dot(x, y))
    c = complex(sxx, sxy)
    if abs(c) < 1e-12:
        raise DegenerateReference(f"|sum(Re(h) h)| = {abs(c):.3g} is degenerate")
    total = sxx + syy
    if abs(sxy) <= 1e-12 * total:
        phi = 0.0
    else:
        phi0 = 0.5 * np.arctan2(-2.0 * sxy, sxx - syy)
        candidates = [phi0 + m * np.pi / 2 for m in range(-3, 4)]
        candidates = [p for p in candidates if -np.pi / 2 < p <= np.pi / 2]
        phi = min(candidates, key=lambda p: (abs(p), p))
    c_, s_ = np.cos(phi), np.sin(phi)
    energy = c_ * c_ * sxx - 2 * c_ * s_ * sxy + s_ * s_ * syy
    if energy < 1e-12 * max(total, 1e-300):
        # the orthogonalising rotation leaves no real part; take the
        # perpendicular solution instead
        phi = phi + np.pi / 2 if phi <= 0 else phi - np.pi / 2
        c_, s_ = np.cos(phi), np.sin(phi)
        energy = c_ * c_ * sxx - 2 * c_ * s_ * sxy + s_ * s_ * syy
    if not energy > 0:
        raise DegenerateReference("reference has no usable real part")
    return complex(np.exp(1j * phi) / np.sqrt(energy))


def scale_reference(h: AnalyticSignal) -> AnalyticSignal:
    """Scale an analytic reference so that ``sum(Re(out) * out) == 1``."""
    return AnalyticSignal(reference_scale(h.samples) * h.samples, h.fs)


def power_spectrum(s: ScalarSignal, pad_factor: int = DEFAULT_PAD_FACTOR) -> Spectrum:
    bins, nfft = spectrum_array(s.samples, pad_factor)
    return Spectrum(bins=bins, freq_resolution=s.fs / nfft, fs=s.fs)


def peak_frequency(spec: Spectrum, lo_hz: float, hi_hz: float) -> float:
    """Frequency of the largest power bin within ``[lo_hz, hi_hz]``."""
    band = spec.band(lo_hz, hi_hz)
    idx = np.flatnonzero(band)
    if idx.size == 0:
        raise ValidationError(f"no spectral bins in [{lo_hz}, {hi_hz}] Hz")
    j = idx[np.argmax(spec.power[idx])]
    return float(j * spec.freq_resolution)

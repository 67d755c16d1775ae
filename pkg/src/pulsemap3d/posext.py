"""Blood-volume-pulse extraction with POS and construction of the face reference.

``pos_array`` is an O(n) closed form of the sliding-window POS algorithm
(temporal normalisation, projection onto the plane orthogonal to skin tone,
alpha tuning, overlap-add). Window statistics come from cumulative sums, and
the overlap-add is rewritten as a per-sample weighting of the centred colour
trace, so a whole block of pixels is processed without a Python loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import signalcore as sc
from .errors import (
    EmptyMask,
    NonPositiveBaseline,
    NoSpectralPeak,
    SignalTooShort,
    SpanMismatch,
    ValidationError,
)
from .frames import FrameSequence, masked_mean_trace

POS_WINDOW_S = 1.6
HR_BAND_HZ = (0.5, 200.0 / 60.0)
REF_BAND_HZ = (0.4, 4.0)
MIN_REFERENCE_S = 20.0
PEAK_RATIO = 3.0
VALIDATION_TOL_BPM = 3.0

# rows: (G - B) and (-2R + G + B)
_PROJECTION = np.array([[0.0, 1.0, -1.0], [-2.0, 1.0, 1.0]])
# normalised-window variances below this count as zero
_VAR_EPS = 1e-24
_PAIRS = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


def _window_sums(x: np.ndarray, length: int) -> np.ndarray:
    """Sums over every length-``length`` window along the last axis."""
    cs = np.cumsum(x, axis=-1)
    out = cs[..., length - 1:].copy()
    out[..., 1:] -= cs[..., :-length]
    return out


def _sliding_coverage(v: np.ndarray, n: int, length: int) -> np.ndarray:
    """For each sample j, the sum of ``v[..., m]`` over windows m containing j.

    ``v`` holds one value per window (``n - length + 1`` along the last axis).
    """
    n_win = v.shape[-1]
    lead = v.shape[:-1]
    # cs[m] = sum(v[:m]); sample j sees windows max(j-L+1, 0) .. min(j, n_win-1)
    cs = np.empty(lead + (n_win + length,))
    cs[..., 0] = 0.0
    np.cumsum(v, axis=-1, out=cs[..., 1:n_win + 1])
    cs[..., n_win + 1:] = cs[..., n_win:n_win + 1]
    out = cs[..., 1:n + 1].copy()
    out[..., length - 1:] -= cs[..., :n - length + 1]
    return out


def pos_array(rgb: np.ndarray, fs: float, window_s: float = POS_WINDOW_S) -> np.ndarray:
    """POS pulse signal for colour traces of shape ``(..., n, 3)``.

    Returns an array of shape ``(..., n)``. Windows whose normalised colour
    variation is zero contribute nothing, so a constant trace gives zeros.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    n = rgb.shape[-2]
    length = int(round(window_s * fs))
    if length < 2:
        raise ValidationError(f"POS window of {window_s} s at {fs} Hz is shorter than 2 samples")
    if n < length:
        raise SignalTooShort(f"POS needs >= {length} samples, got {n}")
    return pos_channels([rgb[..., c] for c in range(3)], length)


def pos_channels(chans: list[np.ndarray], length: int) -> np.ndarray:
    """POS on channel-major traces: three arrays of shape ``(..., n)`` (r, g, b).

    ``length`` is the sliding-window length in samples.
    """
    n = chans[0].shape[-1]
    # centre on the segment mean so that window statistics do not cancel
    chans = [np.ascontiguousarray(ch, dtype=np.float64) for ch in chans]
    base = [ch.mean(axis=-1, keepdims=True) for ch in chans]
    d = [ch - b for ch, b in zip(chans, base)]
    dbar = [_window_sums(x, length) / length for x in d]
    mu = [b + m for b, m in zip(base, dbar)]
    if not all(np.all(m > 0) for m in mu):
        raise ValidationError("POS needs strictly positive window means")
    cov = {(a, b): _window_sums(d[a] * d[b], length) / length - dbar[a] * dbar[b]
           for a, b in _PAIRS}

    inv = [1.0 / m for m in mu]
    # covariance of the temporally normalised channels
    nc = {}
    for (a, b), c in cov.items():
        if a <= b:
            c *= inv[a]
            c *= inv[b]
            nc[a, b] = c
    v1 = nc[1, 1] + nc[2, 2] - 2.0 * nc[1, 2]
    v2 = 4.0 * (nc[0, 0] - nc[0, 1] - nc[0, 2]) + nc[1, 1] + nc[2, 2] + 2.0 * nc[1, 2]
    np.maximum(v1, 0.0, out=v1)
    np.maximum(v2, 0.0, out=v2)
    live = v2 > _VAR_EPS
    alpha = np.sqrt(v1 / np.where(live, v2, 1.0))
    alpha[~live] = 0.0
    keep = (v1 + v2) > _VAR_EPS
    beta = []
    for c in range(3):
        bc = (_PROJECTION[0, c] + alpha * _PROJECTION[1, c]) * inv[c]
        bc[~keep] = 0.0
        beta.append(bc)

    # overlap-add of (h - mean h) with h = beta . d inside each window
    out = -_sliding_coverage(sum(bc * mc for bc, mc in zip(beta, dbar)), n, length)
    for c in range(3):
        out += d[c] * _sliding_coverage(beta[c], n, length)
    return out


def pos(rgb: sc.RgbSignal, window_s: float = POS_WINDOW_S) -> sc.ScalarSignal:
    """Plane-orthogonal-to-skin pulse extraction from an averaged colour trace."""
    if window_s <= 0:
        raise ValidationError("window_s must be positive")
    if len(rgb) < window_s * rgb.fs:
        raise SignalTooShort(f"{len(rgb)} samples is shorter than the {window_s} s POS window")
    return sc.ScalarSignal(pos_array(rgb.samples, rgb.fs, window_s), rgb.fs)


# --------------------------------------------------------------------------
# reference signal


@dataclass(frozen=True)
class SkinMask:
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values).astype(bool)
        if v.ndim != 2:
            raise ValidationError("skin mask must be two-dimensional")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ReferenceBundle:
    """Whole-face reference pulse, its scaled analytic signal, and HR_ref.

    ``s_ref`` spans the whole sequence. Analysis segments take their
    reference through :meth:`segment_reference`, which recomputes the
    analytic signal on the slice so the unit-projection condition holds on
    exactly the samples that are summed.
    """

    s_ref: sc.ScalarSignal
    s_ref_hilb_scaled: sc.AnalyticSignal
    hr_ref_hz: float

    def __post_init__(self) -> None:
        if not HR_BAND_HZ[0] <= self.hr_ref_hz <= HR_BAND_HZ[1]:
            raise ValidationError(f"HR_ref {self.hr_ref_hz} Hz outside physiological range")

    @property
    def hr_ref_bpm(self) -> float:
        return 60.0 * self.hr_ref_hz

    def segment_signal(self, start: int, stop: int) -> sc.ScalarSignal:
        return sc.ScalarSignal(self.s_ref.samples[start:stop], self.s_ref.fs)

    def segment_reference(self, start: int, stop: int) -> sc.AnalyticSignal:
        return sc.scale_reference(sc.analytic(self.segment_signal(start, stop)))


def reference_from_trace(rgb: sc.RgbSignal, pad_factor: int = sc.DEFAULT_PAD_FACTOR,
                         window_s: float = POS_WINDOW_S) -> ReferenceBundle:
    """Reference bundle from an already skin-averaged colour trace."""
    if len(rgb) < MIN_REFERENCE_S * rgb.fs - 1e-9:
        raise SignalTooShort(f"reference needs >= {MIN_REFERENCE_S} s of frames")
    if not np.all(rgb.samples > 0):
        raise NonPositiveBaseline("skin-averaged colour trace is not strictly positive")
    s = pos(rgb, window_s)
    s_ref = sc.bandpass(s, *REF_BAND_HZ)
    hilb = sc.scale_reference(sc.analytic(s_ref))
    hr = hr_from_signal(s_ref, pad_factor, require_peak=True)
    return ReferenceBundle(s_ref=s_ref, s_ref_hilb_scaled=hilb, hr_ref_hz=hr)


def hr_from_signal(s: sc.ScalarSignal, pad_factor: int = sc.DEFAULT_PAD_FACTOR,
                   require_peak: bool = False) -> float:
    """Frequency (Hz) of maximal power inside 30-200 BPM."""
    spec = sc.power_spectrum(s, pad_factor)
    band = spec.band(*HR_BAND_HZ)
    p = spec.power[band]
    j = int(np.argmax(p))
    if require_peak and not p[j] >= PEAK_RATIO * np.median(p):
        raise NoSpectralPeak(
            f"spectral peak {p[j]:.3g} below {PEAK_RATIO}x median in-band power {np.median(p):.3g}")
    return float(spec.freqs[band][j])


def reference_signal(frames: FrameSequence, mask: SkinMask | np.ndarray,
                     pad_factor: int = sc.DEFAULT_PAD_FACTOR) -> ReferenceBundle:
    """Average skin pixels per frame, extract POS, bandpass, and find HR_ref."""
    m = mask.values if isinstance(mask, SkinMask) else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("skin mask has no true pixels")
    trace = masked_mean_trace(frames, m)
    return reference_from_trace(sc.RgbSignal(trace, frames.fs), pad_factor)


@dataclass(frozen=True)
class ValidationReport:
    hr_ref_bpm: float
    hr_ppg_bpm: float
    diff_bpm: float
    passed: bool
    tol_bpm: float = VALIDATION_TOL_BPM

    def to_dict(self) -> dict:
        return {
            "hr_ref_bpm": self.hr_ref_bpm,
            "hr_ppg_bpm": self.hr_ppg_bpm,
            "diff_bpm": self.diff_bpm,
            "passed": self.passed,
            "tol_bpm": self.tol_bpm,
        }


def validate_reference(bundle: ReferenceBundle, contact_ppg: sc.ScalarSignal,
                       tol_bpm: float = VALIDATION_TOL_BPM,
                       span_tol_s: float = 1.0) -> ValidationReport:
    """Compare HR_ref against the spectral HR of a contact PPG over the same span."""
    dur_ref = len(bundle.s_ref) / bundle.s_ref.fs
    dur_ppg = len(contact_ppg) / contact_ppg.fs
    if abs(dur_ref - dur_ppg) > span_tol_s:
        raise SpanMismatch(f"reference spans {dur_ref:.2f} s but contact PPG spans {dur_ppg:.2f} s")
    ppg = contact_ppg
    if abs(ppg.fs - bundle.s_ref.fs) > 1e-9:
        ppg = resample(ppg, bundle.s_ref.fs)
    ppg = sc.bandpass(ppg, *REF_BAND_HZ)
    hr_ppg = 60.0 * hr_from_signal(ppg)
    diff = abs(bundle.hr_ref_bpm - hr_ppg)
    return ValidationReport(bundle.hr_ref_bpm, hr_ppg, diff, diff <= tol_bpm, tol_bpm)


def resample(s: sc.ScalarSignal, fs: float) -> sc.ScalarSignal:
    """Linear-interpolation resampling onto a uniform grid at ``fs``."""
    t_src = s.t
    n = int(np.floor(t_src[-1] * fs)) + 1
    t = np.arange(n) / fs
    return sc.ScalarSignal(np.interp(t, t_src, s.samples), fs)


def signal_from_timestamps(t_s: np.ndarray, values: np.ndarray, fs: float | None = None) -> sc.ScalarSignal:
    """Uniformly resampled signal from (possibly jittered) timestamps."""
    t_s = np.asarray(t_s, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if t_s.ndim != 1 or t_s.shape != values.shape or t_s.size < 2:
        raise ValidationError("timestamps and values must be equal-length 1-D arrays")
    order = np.argsort(t_s, kind="stable")
    t_s, values = t_s[order], values[order]
    if fs is None:
        fs = 1.0 / float(np.median(np.diff(t_s)))
    t0 = t_s[0]
    n = int(np.floor((t_s[-1] - t0) * fs)) + 1
    t = t0 + np.arange(n) / fs
    return sc.ScalarSignal(np.interp(t, t_s, values), fs)

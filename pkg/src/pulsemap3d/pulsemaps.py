"""Per-pixel quasi-stationary pulse maps over sliding k x k windows.

For every analysis segment each window is averaged to an RGB trace. POS of
the trace gives the SNR, the spectral HR and the POS phase. The detrended
colour channels are projected onto the scaled analytic reference to give a
phase and an amplitude per channel. Segment maps are then averaged:
arithmetically for SNR, HR and amplitude, and with unit phasors for phases.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import signalcore as sc
from .errors import EmptyMask, Infeasible, LengthMismatch, ValidationError, ZeroSignal
from .frames import FrameSequence
from .posext import HR_BAND_HZ, POS_WINDOW_S, ReferenceBundle, pos_channels

TYPICAL_K_VALUES = (3, 5, 7, 9, 13, 17)
SNR_CLAMP_DB = 60.0
# window traces up to this size are kept in memory across overlapping segments
TRACE_CACHE_BYTES = 1.5e9
# POS output below this RMS is treated as no signal (normalised units)
ZERO_SIGNAL_RMS = 1e-10
CHANNELS = ("r", "g", "b")
MAP_NAMES = ("snr", "phase_pos", "hr", "phase_r", "phase_g", "phase_b", "amp_r", "amp_g", "amp_b")
MAP_UNITS = {
    "snr": "dB",
    "phase_pos": "rad",
    "hr": "Hz",
    "phase_r": "rad",
    "phase_g": "rad",
    "phase_b": "rad",
    "amp_r": "1",
    "amp_g": "1",
    "amp_b": "1",
}
PHASE_MAPS = frozenset({"phase_pos", "phase_r", "phase_g", "phase_b"})
# fundamental and first harmonic of the 30-200 BPM range
F_HR_BANDS_HZ = ((0.5, 200.0 / 60.0), (1.0, 400.0 / 60.0))


def wrap_phase(x):
    """Wrap angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=np.float64), 2 * np.pi)


@dataclass(frozen=True)
class MapRequest:
    k: int = 9
    segment_len_s: float = 20.0
    n_segments: int = 7
    total_len_s: float = 70.0
    pad_factor: int = sc.DEFAULT_PAD_FACTOR
    detrend_cutoff_hz: float = 0.4
    pos_window_s: float = POS_WINDOW_S
    phase_average: str = "circular"

    def __post_init__(self) -> None:
        if self.k < 1 or self.k % 2 == 0:
            raise ValidationError(f"window size k must be a positive odd integer, got {self.k}")
        if self.n_segments < 1:
            raise ValidationError("n_segments must be >= 1")
        if self.segment_len_s <= 0 or self.total_len_s < self.segment_len_s:
            raise Infeasible(
                f"segment of {self.segment_len_s} s does not fit in {self.total_len_s} s")
        if self.phase_average not in ("circular", "arithmetic"):
            raise ValidationError("phase_average must be 'circular' or 'arithmetic'")


@dataclass(frozen=True)
class SnrWindow:
    hr_ref_hz: float
    tol_fund_bpm: float = 6.0
    tol_harm_bpm: float = 12.0
    range_bpm: tuple[float, float] = (30.0, 200.0)

    def __post_init__(self) -> None:
        if self.tol_fund_bpm <= 0 or self.tol_harm_bpm <= 0:
            raise ValidationError("SNR tolerances must be positive")

    def signal_mask(self, freqs: np.ndarray) -> np.ndarray:
        """U_t: bins around HR_ref or around its first harmonic."""
        eps = 1e-9
        fund = np.abs(freqs - self.hr_ref_hz) <= self.tol_fund_bpm / 60.0 + eps
        harm = np.abs(freqs - 2.0 * self.hr_ref_hz) <= self.tol_harm_bpm / 60.0 + eps
        return fund | harm

    def range_mask(self, freqs: np.ndarray) -> np.ndarray:
        """F_HR: the HR range plus its first harmonic."""
        lo, hi = self.range_bpm[0] / 60.0, self.range_bpm[1] / 60.0
        return ((freqs >= lo) & (freqs <= hi)) | ((freqs >= 2 * lo) & (freqs <= 2 * hi))


def snr_from_power(power: np.ndarray, freqs: np.ndarray, w: SnrWindow):
    """Vectorised SNR over the last axis of ``power``.

    Returns ``(snr_db, clamped)``; both shaped like ``power[..., 0]``. Values
    are clamped to +-60 dB, and ``clamped`` marks where that happened
    (including an empty denominator).
    """
    fr = w.range_mask(freqs)
    u = w.signal_mask(freqs) & fr
    num = power[..., u].sum(axis=-1)
    den = power[..., fr & ~u].sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10.0 * np.log10(num / den)
    clamped = ~(np.abs(db) < SNR_CLAMP_DB)
    db = np.where(np.isnan(db), -SNR_CLAMP_DB, db)
    return np.clip(db, -SNR_CLAMP_DB, SNR_CLAMP_DB), clamped


def snr(s: sc.ScalarSignal, w: SnrWindow, pad_factor: int = sc.DEFAULT_PAD_FACTOR,
        return_flag: bool = False):
    """SNR (dB) of a pulse segment around HR_ref and its first harmonic.

    Raises:
        ZeroSignal: if the segment carries no energy.
    """
    if not HR_BAND_HZ[0] - 1e-9 <= w.hr_ref_hz <= HR_BAND_HZ[1] + 1e-9:
        raise ValidationError(f"HR_ref {w.hr_ref_hz} Hz outside physiological range")
    spec = sc.power_spectrum(s, pad_factor)
    p = spec.power
    if not np.sqrt(np.mean((s.samples - s.samples.mean()) ** 2)) > ZERO_SIGNAL_RMS:
        raise ZeroSignal("pulse segment has no energy")
    db, flag = snr_from_power(p, spec.freqs, w)
    db, flag = float(db), bool(flag)
    return (db, flag) if return_flag else db


def phase_amplitude(s_c_hat: sc.ScalarSignal, ref: sc.AnalyticSignal) -> tuple[float, float]:
    """Phase and amplitude of a detrended channel against the scaled reference."""
    if len(s_c_hat) != len(ref):
        raise LengthMismatch(f"channel has {len(s_c_hat)} samples, reference {len(ref)}")
    z = np.dot(ref.samples, s_c_hat.samples)
    return float(wrap_phase(np.angle(z))), float(abs(z))


def segment_slices(total_len_s: float, segment_len_s: float, n_segments: int,
                   fs: float) -> list[tuple[int, int]]:
    """Uniformly strided analysis segments as ``[start, end)`` frame indices."""
    if n_segments < 1 or segment_len_s <= 0 or total_len_s < segment_len_s:
        raise Infeasible(
            f"{n_segments} segments of {segment_len_s} s do not fit in {total_len_s} s")
    seg = int(round(segment_len_s * fs))
    total = int(round(total_len_s * fs))
    if n_segments == 1:
        return [(0, seg)]
    stride_s = (total_len_s - segment_len_s) / (n_segments - 1)
    starts = [int(round(i * stride_s * fs)) for i in range(n_segments)]
    starts[-1] = total - seg
    return [(s, s + seg) for s in starts]


# --------------------------------------------------------------------------
# maps


@dataclass
class PulseMapSet:
    snr_db: np.ndarray
    phase_pos_rad: np.ndarray
    hr_hz: np.ndarray
    phase_c_rad: np.ndarray          # (3, H, W), r/g/b
    amp_c: np.ndarray                # (3, H, W)
    valid: np.ndarray
    k: int
    view_id: int = 0
    snr_clamped: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def channel(self, name: str) -> np.ndarray:
        if name == "snr":
            return self.snr_db
        if name == "phase_pos":
            return self.phase_pos_rad
        if name == "hr":
            return self.hr_hz
        kind, _, c = name.partition("_")
        if c in CHANNELS:
            idx = CHANNELS.index(c)
            if kind == "phase":
                return self.phase_c_rad[idx]
            if kind == "amp":
                return self.amp_c[idx]
        raise KeyError(f"unknown map {name!r}; expected one of {MAP_NAMES}")

    def maps(self) -> dict[str, np.ndarray]:
        return {name: self.channel(name) for name in MAP_NAMES}


def box_mean(block: np.ndarray, k: int) -> np.ndarray:
    """Mean over every k x k window of ``(T, H, W, C)`` frames (valid region).

    Summation is separable and runs in a fixed order, so results do not
    depend on how callers partition the work.
    """
    t, h, w = block.shape[:3]
    if h < k or w < k:
        raise ValidationError(f"frames {h}x{w} are smaller than the {k}x{k} window")
    rows = block[:, :, 0:w - k + 1].copy()
    for dx in range(1, k):
        rows += block[:, :, dx:dx + w - k + 1]
    out = rows[:, 0:h - k + 1].copy()
    for dy in range(1, k):
        out += rows[:, dy:dy + h - k + 1]
    out /= k * k
    return out


@dataclass
class _SegmentRef:
    hilb: np.ndarray          # scaled analytic reference, (n,)
    ref_bin: complex          # reference FFT value at the HR_ref bin
    bin_index: int
    freqs: np.ndarray
    window: SnrWindow


def _segment_chunk(chans: list[np.ndarray], fs: float, req: MapRequest, sref: _SegmentRef) -> dict:
    """All per-pixel quantities for one block of window traces ``(P, n)`` x 3."""
    n_pix = chans[0].shape[0]
    valid = np.ones(n_pix, dtype=bool)
    bad = np.zeros(n_pix, dtype=bool)
    for ch in chans:
        bad |= ~np.all(np.isfinite(ch), axis=-1) | ~(ch.min(axis=-1) > 0)
    if bad.any():
        chans = [np.where(bad[:, None], 1.0, ch) for ch in chans]
        valid &= ~bad

    length = int(round(req.pos_window_s * fs))
    s = pos_channels(chans, length)
    rms = np.sqrt(np.mean((s - s.mean(axis=-1, keepdims=True)) ** 2, axis=-1))
    valid &= rms > ZERO_SIGNAL_RMS

    bins, _ = sc.spectrum_array(s, req.pad_factor)
    power = bins.real ** 2 + bins.imag ** 2
    snr_db, clamped = snr_from_power(power, sref.freqs, sref.window)
    band = (sref.freqs >= HR_BAND_HZ[0]) & (sref.freqs <= HR_BAND_HZ[1])
    band_idx = np.flatnonzero(band)
    hr = sref.freqs[band_idx[np.argmax(power[:, band_idx], axis=-1)]]
    phase_pos = np.angle(sref.ref_bin * np.conj(bins[:, sref.bin_index]))

    phase_c = np.empty((3, n_pix))
    amp_c = np.empty((3, n_pix))
    for c, ch in enumerate(chans):
        lp = sc.lowpass_array(ch, fs, req.detrend_cutoff_hz)
        ok = np.all(lp > 0, axis=-1)
        valid &= ok
        lp = np.where(ok[:, None], lp, 1.0)
        z = ((ch - lp) / lp) @ sref.hilb
        phase_c[c] = np.angle(z)
        amp_c[c] = np.abs(z)
    return {
        "snr": snr_db, "clamped": clamped, "hr": hr, "phase_pos": phase_pos,
        "phase_c": phase_c, "amp_c": amp_c, "valid": valid,
    }


def _segment_reference(ref: ReferenceBundle, start: int, stop: int, fs: float,
                       pad_factor: int) -> _SegmentRef:
    s_seg = ref.segment_signal(start, stop)
    hilb = ref.segment_reference(start, stop).samples
    bins, nfft = sc.spectrum_array(s_seg.samples, pad_factor)
    df = fs / nfft
    b = int(round(ref.hr_ref_hz / df))
    return _SegmentRef(hilb=hilb, ref_bin=complex(bins[b]), bin_index=b,
                       freqs=np.arange(bins.shape[0]) * df, window=SnrWindow(ref.hr_ref_hz))


def window_traces(frames: FrameSequence, k: int, start: int, stop: int,
                  block: int = 150, select: np.ndarray | None = None) -> np.ndarray:
    """k x k window means of frames ``[start, stop)`` as channel-major traces
    ``(3, P, T)`` over the interior pixels (row-major), or over the flat
    interior indices ``select`` only."""
    h, w = frames.height, frames.width
    p = (h - k + 1) * (w - k + 1)
    n_out = p if select is None else len(select)
    out = np.empty((3, n_out, stop - start))
    for s0 in range(start, stop, block):
        s1 = min(s0 + block, stop)
        win = box_mean(frames.read(s0, s1), k).reshape(s1 - s0, p, 3)
        if select is not None:
            win = win[:, select]
        out[:, :, s0 - start:s1 - start] = win.transpose(2, 1, 0)
    return out


def segment_maps(traces: np.ndarray, fs: float, req: MapRequest, sref: _SegmentRef,
                 shape: tuple[int, int], workers: int = 1, chunk: int = 1024) -> dict:
    """Maps of one segment from window traces ``(3, P, n)``; interior pixels only."""
    n_pix = traces.shape[1]
    starts = list(range(0, n_pix, chunk))

    def run(s0: int) -> dict:
        return _segment_chunk([np.ascontiguousarray(traces[c, s0:s0 + chunk]) for c in range(3)],
                              fs, req, sref)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s0) for s0 in starts]
    out = {key: np.concatenate([p[key] for p in parts], axis=-1) for key in parts[0]}
    out["shape"] = shape
    return out


def window_maps(frames: FrameSequence, req: MapRequest, ref: ReferenceBundle,
                view_id: int = 0, workers: int = 1, mask: np.ndarray | None = None,
                cache_bytes: float = TRACE_CACHE_BYTES) -> PulseMapSet:
    """Quasi-stationary pulse maps of one view, averaged over segments.

    Pixels closer than ``k // 2`` to the border, pixels outside ``mask`` (if
    given), and pixels for which any segment fails (non-positive baseline, no
    POS energy) are invalid and hold NaN. Per-pixel failures never abort the
    map. Window traces of the analysed span are computed once when they fit
    in ``cache_bytes``; otherwise each segment re-reads its frames. Both paths
    give identical results.
    """
    fs = frames.fs
    if frames.n_frames < int(round(req.total_len_s * fs)):
        raise ValidationError(
            f"sequence has {frames.n_frames} frames, request needs {req.total_len_s} s at {fs} Hz")
    if len(ref.s_ref) < int(round(req.total_len_s * fs)):
        raise ValidationError("reference signal is shorter than the requested span")
    slices = segment_slices(req.total_len_s, req.segment_len_s, req.n_segments, fs)
    h, w, r = frames.height, frames.width, req.k // 2
    if h < req.k or w < req.k:
        raise ValidationError(f"frames {h}x{w} are smaller than the {req.k}x{req.k} window")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ValidationError(f"mask shape {mask.shape} != frame shape {(h, w)}")
    shape = (h - req.k + 1, w - req.k + 1)
    # only window centres inside the mask are analysed
    select = None
    if mask is not None:
        select = np.flatnonzero(mask[r:r + shape[0], r:r + shape[1]])
        if select.size == 0:
            raise EmptyMask(f"mask leaves no {req.k}x{req.k} window centre inside the frame")
    n_sel = shape[0] * shape[1] if select is None else select.size
    span = slices[-1][1]
    cached = None
    if 3 * n_sel * span * 8 <= cache_bytes:
        cached = window_traces(frames, req.k, 0, span, select=select)

    acc = None
    for start, stop in slices:
        sref = _segment_reference(ref, start, stop, fs, req.pad_factor)
        traces = (cached[:, :, start:stop] if cached is not None
                  else window_traces(frames, req.k, start, stop, select=select))
        seg = segment_maps(traces, fs, req, sref, shape, workers=workers)
        if acc is None:
            acc = {
                "snr": np.zeros_like(seg["snr"]), "hr": np.zeros_like(seg["hr"]),
                "amp_c": np.zeros_like(seg["amp_c"]),
                "phase_pos": np.zeros(seg["phase_pos"].shape, dtype=np.complex128),
                "phase_c": np.zeros(seg["phase_c"].shape, dtype=np.complex128),
                "valid": np.ones_like(seg["valid"]), "clamped": np.zeros_like(seg["clamped"]),
                "shape": seg["shape"],
            }
        acc["snr"] += seg["snr"]
        acc["hr"] += seg["hr"]
        acc["amp_c"] += seg["amp_c"]
        acc["valid"] &= seg["valid"]
        acc["clamped"] |= seg["clamped"]
        for key in ("phase_pos", "phase_c"):
            if req.phase_average == "circular":
                acc[key] += np.exp(1j * seg[key])
            else:
                acc[key] += seg[key]

    m = len(slices)
    if req.phase_average == "circular":
        phase_pos = np.angle(acc["phase_pos"])
        phase_c = np.angle(acc["phase_c"])
    else:
        phase_pos = acc["phase_pos"].real / m
        phase_c = acc["phase_c"].real / m

    hi, wi = acc["shape"]

    def place(v: np.ndarray, dtype=np.float64, fill=np.nan) -> np.ndarray:
        lead = v.shape[:-1]
        if select is not None:
            grid = np.full(lead + (hi * wi,), fill, dtype=dtype)
            grid[..., select] = v
            v = grid
        full = np.full(lead + (h, w), fill, dtype=dtype)
        full[..., r:r + hi, r:r + wi] = v.reshape(lead + (hi, wi))
        return full

    valid = place(acc["valid"], dtype=bool, fill=False)
    if mask is not None:
        valid &= mask

    def finish(v: np.ndarray) -> np.ndarray:
        out = place(v)
        out[..., ~valid] = np.nan
        return out

    return PulseMapSet(
        snr_db=finish(acc["snr"] / m),
        phase_pos_rad=finish(wrap_phase(phase_pos)),
        hr_hz=finish(acc["hr"] / m),
        phase_c_rad=finish(wrap_phase(phase_c)),
        amp_c=finish(acc["amp_c"] / m),
        valid=valid,
        k=req.k,
        view_id=view_id,
        snr_clamped=place(acc["clamped"], dtype=bool, fill=False) & valid,
        meta={"segments": slices, "hr_ref_hz": ref.hr_ref_hz, "phase_average": req.phase_average,
              "masked": mask is not None},
    )

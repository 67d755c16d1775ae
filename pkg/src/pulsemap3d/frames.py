"""Frame sequences: time-ordered RGB frames with a sample rate.

Sequences are read in blocks (``read(start, stop)``) so that a 70 s video never
has to be resident in memory at once. Every reader returns float64 arrays of
shape ``(T, H, W, 3)`` in r, g, b order.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .errors import ValidationError


@runtime_checkable
class FrameSequence(Protocol):
    fs: float
    n_frames: int
    height: int
    width: int

    def read(self, start: int, stop: int) -> np.ndarray: ...


class ArrayFrames:
    """In-memory frame sequence backed by an ndarray."""

    def __init__(self, frames: np.ndarray, fs: float):
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValidationError(f"frames must have shape (T, H, W, 3), got {frames.shape}")
        if not fs > 0:
            raise ValidationError("fs must be positive")
        self._frames = frames
        self.fs = float(fs)
        self.n_frames, self.height, self.width = frames.shape[:3]

    def read(self, start: int, stop: int) -> np.ndarray:
        check_range(self, start, stop)
        return np.asarray(self._frames[start:stop], dtype=np.float64)

    @property
    def array(self) -> np.ndarray:
        return self._frames


def check_range(seq: FrameSequence, start: int, stop: int) -> None:
    if not 0 <= start < stop <= seq.n_frames:
        raise ValidationError(f"frame range [{start}, {stop}) outside [0, {seq.n_frames})")


def iter_blocks(seq: FrameSequence, start: int = 0, stop: int | None = None, block: int = 150):
    """Yield ``(offset, frames)`` blocks covering ``[start, stop)`` in order."""
    stop = seq.n_frames if stop is None else stop
    for s in range(start, stop, block):
        e = min(s + block, stop)
        yield s, seq.read(s, e)


def masked_mean_trace(seq: FrameSequence, mask: np.ndarray, start: int = 0,
                      stop: int | None = None) -> np.ndarray:
    """Per-frame mean colour over ``mask``, shape ``(T, 3)``.

    The pixel order is fixed (row-major), so the result does not depend on
    how the sequence is split into blocks.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (seq.height, seq.width):
        raise ValidationError(f"mask shape {mask.shape} != frame shape {(seq.height, seq.width)}")
    idx = np.flatnonzero(mask.ravel())
    out = []
    for _, block in iter_blocks(seq, start, stop):
        flat = block.reshape(block.shape[0], -1, 3)[:, idx, :]
        out.append(flat.mean(axis=1))
    return np.concatenate(out, axis=0)

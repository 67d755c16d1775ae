"""Evaluation metrics: Pearson correlation, circular statistics, reprojection
error, per-view dependency analysis and cross-subject texture aggregation.

Phase spread is reported as the circular standard deviation
``sqrt(-2 ln R)`` where ``R`` is the magnitude of the mean unit phasor.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConstantInput, NoValidPixels, SemanticMismatch, ValidationError
from .geometry.camera import CameraParams
from .geometry.mesh import TriMesh
from .geometry.raster import RasterResult, rasterize
from .geometry.texture import UvTextureMap, check_compatible, reproject
from .pulsemaps import wrap_phase

RELEVANCE_P = 0.05
RELEVANCE_R = 0.2
MIN_VALID_FRACTION = 0.5


# --------------------------------------------------------------------------
# correlation


def paired_valid(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValidationError(f"paired inputs differ in size: {x.size} vs {y.size}")
    ok = np.isfinite(x) & np.isfinite(y)
    return x[ok], y[ok]


def pearson(x, y) -> float:
    """Pearson r over pairs where both members are finite.

    Raises:
        ValidationError: fewer than 3 valid pairs.
        ConstantInput: either series is constant over the valid pairs.
    """
    x, y = paired_valid(x, y)
    if x.size < 3:
        raise ValidationError(f"need >= 3 valid pairs, got {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    # relative test so that tiny rounding residue of a constant still counts
    if sxx <= 1e-28 * max(float(np.dot(x, x)), 1e-300) or sxx == 0:
        raise ConstantInput("first series is constant")
    if syy <= 1e-28 * max(float(np.dot(y, y)), 1e-300) or syy == 0:
        raise ConstantInput("second series is constant")
    r = float(np.dot(xc, yc)) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


@dataclass(frozen=True)
class Dependency:
    r: float
    p: float
    n: int
    relevant: bool

    def to_dict(self) -> dict:
        return {"r": self.r, "p": self.p, "n": self.n, "relevant": self.relevant}


def correlation_pvalue(r: float, n: int) -> float:
    """Two-sided p-value of Pearson ``r`` via the t statistic with n-2 d.o.f."""
    if abs(r) >= 1.0:
        return 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def dependency_analysis(errors_a, errors_b, alpha: float = RELEVANCE_P,
                        r_min: float = RELEVANCE_R) -> Dependency:
    """Relevant iff ``p < alpha`` and ``|r| > r_min``."""
    a = np.asarray(errors_a, dtype=np.float64).ravel()
    b = np.asarray(errors_b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValidationError(f"series lengths differ: {a.size} vs {b.size}")
    x, y = paired_valid(a, b)
    if x.size < 5:
        raise ValidationError(f"dependency analysis needs n >= 5, got {x.size}")
    r = pearson(x, y)
    p = correlation_pvalue(r, x.size)
    return Dependency(r, p, int(x.size), bool(p < alpha and abs(r) > r_min))


def rank_test(inside, outside, alternative: str) -> float:
    """One-sided Mann-Whitney U p-value that ``inside`` is ``alternative``
    ("greater" or "less") than ``outside``."""
    a = np.asarray(inside, dtype=np.float64).ravel()
    b = np.asarray(outside, dtype=np.float64).ravel()
    a, b = a[np.isfinite(a)], b[np.isfinite(b)]
    if a.size == 0 or b.size == 0:
        raise NoValidPixels("rank test needs values on both sides")
    return float(stats.mannwhitneyu(a, b, alternative=alternative).pvalue)


# --------------------------------------------------------------------------
# circular statistics


def circular_difference(a, b) -> np.ndarray:
    """``|wrap(a - b)|`` in ``[0, pi]``."""
    return np.abs(wrap_phase(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def circular_mean(phases, axis=None) -> np.ndarray:
    z = np.nanmean(np.exp(1j * np.asarray(phases, dtype=np.float64)), axis=axis)
    return wrap_phase(np.angle(z))


def circular_std(phases, axis=None) -> np.ndarray:
    R = np.abs(np.nanmean(np.exp(1j * np.asarray(phases, dtype=np.float64)), axis=axis))
    return np.sqrt(-2.0 * np.log(np.clip(R, 1e-300, 1.0)))


# --------------------------------------------------------------------------
# reprojection error


@dataclass
class ViewError:
    view_id: int
    rms_full: float
    rms_skin: float
    n_full: int
    n_skin: int


@dataclass
class ReprojectionReport:
    semantic: str
    views: list[ViewError]
    error_maps: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def rms_full(self) -> np.ndarray:
        return np.array([v.rms_full for v in self.views])

    def rms_skin(self) -> np.ndarray:
        return np.array([v.rms_skin for v in self.views])

    def to_dict(self) -> dict:
        return {
            "semantic": self.semantic,
            "views": [
                {"view_id": v.view_id, "rms_full": _num(v.rms_full), "rms_skin": _num(v.rms_skin),
                 "n_full": v.n_full, "n_skin": v.n_skin}
                for v in self.views
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["view_id", "rms_full", "rms_skin"])
        for v in self.views:
            w.writerow([v.view_id, _fmt(v.rms_full), _fmt(v.rms_skin)])
        return buf.getvalue()


def _num(x: float) -> float | None:
    return None if not np.isfinite(x) else float(x)


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def _rms(err: np.ndarray, m: np.ndarray) -> tuple[float, int]:
    n = int(m.sum())
    if n == 0:
        return float("nan"), 0
    return float(np.sqrt(np.mean(err[m] ** 2))), n


def reprojection_error(tex: UvTextureMap, mesh: TriMesh, cams: list[CameraParams],
                       source_maps: list[np.ndarray], skin_masks: list[np.ndarray] | None = None,
                       rasters: list[RasterResult] | None = None) -> ReprojectionReport:
    """Per-view RMS of ``|reprojected texture - source map|``.

    The difference is circular for phase textures. Pixels count where both
    values are finite; the skin-only RMS further requires the skin mask.
    A view with no valid pixel gets NaN; if no view has any, NoValidPixels.
    """
    if len(cams) != len(source_maps):
        raise ValidationError("need one source map per camera")
    if skin_masks is not None and len(skin_masks) != len(cams):
        raise ValidationError("need one skin mask per camera")
    views, maps = [], {}
    for i, (cam, src) in enumerate(zip(cams, source_maps)):
        src = np.asarray(src, dtype=np.float64)
        if src.shape != (cam.height, cam.width):
            raise ValidationError(f"view {cam.view_id}: map shape {src.shape} != camera image size")
        r = rasters[i] if rasters is not None else rasterize(mesh, cam)
        rep = reproject(tex, mesh, cam, r)
        if tex.is_phase:
            err = circular_difference(rep, src)
        else:
            err = np.abs(rep - src)
        full = np.isfinite(err)
        skin = full if skin_masks is None else full & np.asarray(skin_masks[i], dtype=bool)
        rf, nf = _rms(err, full)
        rs, ns = _rms(err, skin)
        views.append(ViewError(int(cam.view_id), rf, rs, nf, ns))
        maps[int(cam.view_id)] = np.where(full, err, np.nan)
    if not any(v.n_full for v in views):
        raise NoValidPixels(f"no valid pixels in any view for {tex.semantic!r}")
    return ReprojectionReport(tex.semantic, views, maps)


# --------------------------------------------------------------------------
# cross-subject aggregation


def aggregate_textures(textures: list[UvTextureMap], semantic: str | None = None,
                       min_fraction: float = MIN_VALID_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Per-texel mean and population std over subjects.

    Phase textures use the circular mean and circular std. Texels valid in
    fewer than ``min_fraction`` of the subjects are NaN in both outputs.
    """
    if len(textures) < 2:
        raise ValidationError("aggregation needs at least 2 textures")
    check_compatible(textures)
    if semantic is not None and textures[0].semantic != semantic:
        raise SemanticMismatch(f"textures are {textures[0].semantic!r}, expected {semantic!r}")
    vals = np.stack([np.where(t.valid, t.value, np.nan) for t in textures])
    count = np.isfinite(vals).sum(axis=0)
    keep = count >= min_fraction * len(textures)
    keep &= count > 0
    mean = np.full(vals.shape[1:], np.nan)
    std = np.full(vals.shape[1:], np.nan)
    v = vals[:, keep]
    if textures[0].is_phase:
        z = np.nanmean(np.exp(1j * v), axis=0)
        mean[keep] = wrap_phase(np.angle(z))
        std[keep] = np.sqrt(-2.0 * np.log(np.clip(np.abs(z), 1e-300, 1.0)))
    else:
        mean[keep] = np.nanmean(v, axis=0)
        std[keep] = np.nanstd(v, axis=0)
    return mean, std


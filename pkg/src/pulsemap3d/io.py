"""File formats of the workspace.

Numeric maps are raw float32 little-endian row-major arrays (``<stem>.f32``)
next to a JSON sidecar (``<stem>.json``) holding at least ``width``,
``height``, ``semantic``, ``k``, ``view_id`` and ``units``. Invalid pixels or
texels are NaN. Every writer produces byte-identical output for identical
input: JSON is written with sorted keys and no timestamps.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import InputError, ValidationError
from .frames import check_range
from .geometry.camera import CameraParams
from .geometry.mesh import TriMesh, read_obj, write_obj
from .geometry.texture import UvTextureMap, preview_rgb
from .pulsemaps import MAP_UNITS

FRAME_PATTERN = "{:06d}.png"
CONTACT_HEADER = ("t_unix_s", "value")


def _cv2():
    import cv2

    return cv2


# --------------------------------------------------------------------------
# JSON


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")


def read_json(path: str | Path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}", path=str(path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}", path=str(path)) from exc


def require_file(path: str | Path, what: str = "file") -> Path:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing {what}: {path}", path=str(path))
    return path


# --------------------------------------------------------------------------
# float32 maps


def _with(stem: Path, ext: str) -> Path:
    # not Path.with_suffix: stems such as "snr.weight" contain dots
    return stem.parent / f"{stem.name}{ext}"


def write_map(stem: str | Path, values: np.ndarray, sidecar: dict) -> None:
    """Write ``<stem>.f32`` and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f4"))
    if arr.ndim != 2:
        raise ValidationError(f"maps are two-dimensional, got shape {arr.shape}")
    meta = dict(sidecar)
    meta.update({"height": int(arr.shape[0]), "width": int(arr.shape[1]),
                 "dtype": "float32", "byte_order": "little"})
    for key in ("semantic", "units"):
        if key not in meta:
            raise ValidationError(f"map sidecar needs {key!r}")
    meta.setdefault("k", None)
    meta.setdefault("view_id", None)
    _with(stem, ".f32").write_bytes(arr.tobytes())
    write_json(_with(stem, ".json"), meta)


def read_map(stem: str | Path) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    meta = read_json(_with(stem, ".json"))
    raw_path = require_file(_with(stem, ".f32"), "map data")
    raw = raw_path.read_bytes()
    h, w = int(meta["height"]), int(meta["width"])
    if len(raw) != 4 * h * w:
        raise InputError(f"{raw_path}: {len(raw)} bytes, expected {4 * h * w} for {h}x{w} float32",
                         path=str(raw_path))
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64), meta


def map_sidecar(semantic: str, view_id: int | None, k: int | None, units: str | None = None,
                **extra) -> dict:
    base = semantic[3:] if semantic.startswith("gt_") else semantic
    out = {"semantic": semantic, "view_id": view_id, "k": k,
           "units": units if units is not None else MAP_UNITS.get(base, "1")}
    out.update(extra)
    return out


# --------------------------------------------------------------------------
# textures

TEXTURE_PARTS = ("weight", "nviews", "confidence")


def write_texture(stem: str | Path, tex: UvTextureMap, sidecar: dict,
                  preview: bool = True) -> None:
    """Value map plus ``.weight``, ``.nviews`` and ``.confidence`` companions
    and, optionally, an 8-bit PNG preview."""
    stem = Path(stem)
    common = dict(sidecar)
    common.update({"resolution": tex.resolution, "is_phase": tex.is_phase,
                   "phase_average": tex.phase_average})
    value = np.where(tex.valid, tex.value, np.nan)
    write_map(stem, value, map_sidecar(tex.semantic, None, common.pop("k", None), **common))
    parts = {"weight": tex.weight_sum, "nviews": tex.n_views.astype(np.float64),
             "confidence": np.where(tex.valid, tex.confidence, np.nan)}
    for name, arr in parts.items():
        write_map(stem.parent / f"{stem.name}.{name}", arr,
                  map_sidecar(f"{tex.semantic}.{name}", None, None, units="1", **common))
    if preview:
        write_png(stem.parent / f"{stem.name}.png", preview_rgb(value, tex.semantic))


def read_texture(stem: str | Path) -> UvTextureMap:
    stem = Path(stem)
    value, meta = read_map(stem)
    weight, _ = read_map(stem.parent / f"{stem.name}.weight")
    nviews, _ = read_map(stem.parent / f"{stem.name}.nviews")
    conf, _ = read_map(stem.parent / f"{stem.name}.confidence")
    return UvTextureMap.from_arrays(value, weight, nviews.astype(np.int32), meta["semantic"],
                                    is_phase=bool(meta.get("is_phase")),
                                    confidence=np.nan_to_num(conf, nan=0.0),
                                    phase_average=meta.get("phase_average", "circular"))


# --------------------------------------------------------------------------
# PNG


def write_png(path: str | Path, img: np.ndarray) -> None:
    cv2 = _cv2()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise InputError(f"PNG encoding failed for {path}", path=str(path))
    path.write_bytes(buf.tobytes())


def read_png(path: str | Path, flags: int | None = None) -> np.ndarray:
    cv2 = _cv2()
    path = require_file(path, "image")
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_UNCHANGED if flags is None else flags)
    if img is None:
        raise InputError(f"cannot decode image {path}", path=str(path))
    return img


def quantize_frame(rgb: np.ndarray, bits: int) -> np.ndarray:
    """Float RGB in [0, 1] to BGR uint8/uint16 (values outside are clipped)."""
    if bits not in (8, 16):
        raise ValidationError(f"frame bit depth must be 8 or 16, got {bits}")
    top = (1 << bits) - 1
    q = np.round(np.clip(rgb, 0.0, 1.0) * top).astype(np.uint8 if bits == 8 else np.uint16)
    return q[..., ::-1]


def write_frame(path: str | Path, rgb: np.ndarray, bits: int = 16) -> None:
    write_png(path, quantize_frame(rgb, bits))


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path: str | Path) -> np.ndarray:
    img = read_png(path)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValidationError(f"{path}: mask must be an 8-bit single-channel PNG")
    return img > 0


class PngFrames:
    """Frame sequence backed by a directory of ``%06d.png`` files.

    8-bit frames are scaled by 1/255 and 16-bit frames by 1/65535, so either
    depth yields intensities in [0, 1].
    """

    def __init__(self, directory: str | Path, fs: float):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise InputError(f"missing frame directory: {self.directory}", path=str(self.directory))
        if not fs > 0:
            raise ValidationError("fs must be positive")
        self.fs = float(fs)
        files = sorted(p for p in self.directory.glob("*.png") if p.stem.isdigit())
        if not files:
            raise InputError(f"no frames in {self.directory}", path=str(self.directory))
        idx = [int(p.stem) for p in files]
        if idx != list(range(len(files))):
            raise InputError(f"{self.directory}: frames must be numbered 0..{len(files) - 1} "
                             "without gaps", path=str(self.directory))
        self.files = files
        self.n_frames = len(files)
        first = self._load(0)
        self.height, self.width = first.shape[:2]

    def _load(self, i: int) -> np.ndarray:
        img = read_png(self.files[i])
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError(f"{self.files[i]}: expected a 3-channel image")
        scale = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}.get(img.dtype)
        if scale is None:
            raise ValidationError(f"{self.files[i]}: unsupported dtype {img.dtype}")
        return img[..., ::-1].astype(np.float64) / scale

    def read(self, start: int, stop: int) -> np.ndarray:
        check_range(self, start, stop)
        out = np.empty((stop - start, self.height, self.width, 3))
        for j, i in enumerate(range(start, stop)):
            img = self._load(i)
            if img.shape[:2] != (self.height, self.width):
                raise ValidationError(f"{self.files[i]}: frame size differs from the first frame")
            out[j] = img
        return out


# --------------------------------------------------------------------------
# cameras, landmarks, meshes, contact PPG


def write_cameras(path: str | Path, cams: list[CameraParams]) -> None:
    write_json(path, [c.to_dict() for c in cams])


def read_cameras(path: str | Path) -> list[CameraParams]:
    data = read_json(require_file(path, "cameras file"))
    if not isinstance(data, list):
        raise ValidationError(f"{path}: cameras file must hold a JSON array")
    try:
        return [CameraParams.from_dict(d) for d in data]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: bad camera record: {exc}") from exc


def write_landmarks(path: str | Path, view_id: int, points: np.ndarray) -> None:
    pts = [None if not np.all(np.isfinite(p)) else [float(p[0]), float(p[1])]
           for p in np.asarray(points, dtype=np.float64)]
    write_json(path, {"view_id": int(view_id), "points": pts})


def read_landmarks(path: str | Path) -> tuple[int, np.ndarray]:
    """``(view_id, points)``; ``null`` entries (landmark not detected) become NaN."""
    data = read_json(require_file(path, "landmarks file"))
    try:
        pts = np.array([[np.nan, np.nan] if p is None else [float(p[0]), float(p[1])]
                        for p in data["points"]], dtype=np.float64).reshape(-1, 2)
        return int(data["view_id"]), pts
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ValidationError(f"{path}: bad landmarks record: {exc}") from exc


def load_obj(path: str | Path) -> TriMesh:
    """Read an OBJ; unreadable or malformed files are input errors."""
    path = require_file(path, "mesh")
    try:
        return read_obj(path)
    except ValidationError as exc:
        raise InputError(str(exc), path=str(path)) from exc


def save_obj(path: str | Path, mesh: TriMesh) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_obj(path, mesh)


def write_contact_csv(path: str | Path, t_unix_s: np.ndarray, values: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTACT_HEADER)
        for t, v in zip(t_unix_s, values):
            w.writerow([f"{t:.6f}", repr(float(v))])


def read_contact_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = require_file(path, "contact PPG")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(h.strip() for h in rows[0]) != CONTACT_HEADER:
        raise ValidationError(f"{path}: header must be {','.join(CONTACT_HEADER)}")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{path}: bad contact PPG row: {exc}") from exc
    if data.shape[0] < 2:
        raise ValidationError(f"{path}: contact PPG needs at least 2 samples")
    return data[:, 0], data[:, 1]

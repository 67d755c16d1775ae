"""Command line pipeline: ``pulsemap3d {synth,maps,fit,bake,eval,report}``.

Every subcommand reads a JSON run manifest (``--manifest``) and works inside
the per-subject workspace::

    <root>/<subject>/frames/<view>/%06d.png
                     masks/<view>.png, masks/<view>_skin.png
                     cameras.json  scan.obj  model.pm3dmm  landmarks/<view>.json
                     maps/<view>/<map>.f32 + .json
                     fit/  textures/  reports/  gt/

Exit codes: 0 success, 2 missing or unreadable input, 3 validation failure.
Failures print one JSON object ``{"error", "message", "exit_code", "path"}``
on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import io as wio
from .errors import (
    DegenerateConfiguration,
    InputError,
    PulseMapError,
    ValidationError,
)
from .evalstats import dependency_analysis, pearson, reprojection_error
from .frames import iter_blocks
from .geometry.camera import CameraParams
from .geometry.mesh import TriMesh
from .geometry.raster import backproject_landmarks, rasterize
from .geometry.texture import WEIGHTINGS, UvTextureMap, bake_view, plan_view, uv_lookup
from .morphfit.align import rigid_align
from .morphfit.fit import FitWeights, fit_scan
from .morphfit.model import FitState, MorphableModel, evaluate_model
from .morphfit.surface import clean_scan, mesh_to_scan_error
from .posext import reference_signal, signal_from_timestamps, validate_reference
from .pulsemaps import MAP_NAMES, MapRequest, window_maps

SCHEMA_VERSION = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
DIFFUSE = "diffuse"
VALID = "valid"

DEFAULTS: dict[str, dict] = {
    "paths": {
        "frames": "frames", "masks": "masks", "cameras": "cameras.json", "scan": "scan.obj",
        "model": "model.pm3dmm", "landmarks": "landmarks", "contact_ppg": "contact_ppg.csv",
        "ground_truth": "gt", "maps": "maps", "fit": "fit", "textures": "textures",
        "reports": "reports",
    },
    "maps": {
        "k": 9, "segment_len_s": 20.0, "n_segments": 7, "total_len_s": 70.0, "pad_factor": 4,
        "detrend_cutoff_hz": 0.4, "pos_window_s": 1.6, "phase_average": "circular",
        "mask_maps": True,
    },
    "fit": {"iters": 30, "graduated": True, "min_landmarks": 6, "weights": {}},
    "bake": {"resolution": 256, "weighting": "cosine", "maps": list(MAP_NAMES) + [DIFFUSE]},
    "eval": {"maps": list(MAP_NAMES) + [DIFFUSE], "reference_map": DIFFUSE},
    "report": {"subjects": []},
    "synth": {"scenario": {}, "scenario_file": None, "frame_bits": 16, "contact_ppg": True,
              "landmark_views": None},
    "stages": {"synth": True, "maps": True, "fit": True, "bake": True, "eval": True,
               "report": True},
}
TOP_LEVEL = {"schema_version", "subject", "root", "seed", "fps", "views"} | set(DEFAULTS)


class ManifestError(ValidationError):
    pass


def _merge(section: str, given) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ManifestError(f"manifest section {section!r} must be an object")
    base = DEFAULTS[section]
    unknown = set(given) - set(base)
    if unknown:
        raise ManifestError(f"unknown keys in {section!r}: {sorted(unknown)}")
    out = json.loads(json.dumps(base))
    out.update(given)
    return out


@dataclass(frozen=True)
class RunManifest:
    """Resolved run configuration. ``root`` is interpreted relative to the
    manifest file; the hash covers the normalised content, not the location."""

    subject: str
    root: str
    seed: int
    fps: float
    views: tuple[int, ...] | None
    paths: dict
    maps: dict
    fit: dict
    bake: dict
    eval: dict
    report: dict
    synth: dict
    stages: dict
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str = ".", seed: int | None = None,
                  k: int | None = None) -> "RunManifest":
        if not isinstance(d, dict):
            raise ManifestError("manifest must be a JSON object")
        unknown = set(d) - TOP_LEVEL
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ManifestError(f"schema_version must be {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
        subject = d.get("subject")
        if not isinstance(subject, str) or not subject or "/" in subject or subject in (".", ".."):
            raise ManifestError("subject must be a non-empty name without '/'")
        sections = {s: _merge(s, d.get(s)) for s in DEFAULTS}
        if k is not None:
            sections["maps"]["k"] = int(k)
        seed_v = d.get("seed", 0) if seed is None else seed
        if isinstance(seed_v, bool) or not isinstance(seed_v, int) or seed_v < 0:
            raise ManifestError("seed must be a non-negative integer")
        fps = d.get("fps", 30.0)
        if isinstance(fps, bool) or not isinstance(fps, (int, float)) or not fps > 0:
            raise ManifestError("fps must be a positive number")
        views = d.get("views")
        if views is not None:
            if not isinstance(views, list) or not all(isinstance(v, int) and v >= 0 for v in views):
                raise ManifestError("views must be a list of non-negative integers")
            views = tuple(sorted(set(views)))
        m = cls(subject, str(d.get("root", ".")), int(seed_v), float(fps), views,
                base_dir=Path(base_dir), **sections)
        m.validate()
        return m

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None, k: int | None = None) -> "RunManifest":
        path = Path(path)
        data = wio.read_json(wio.require_file(path, "manifest"))
        return cls.from_dict(data, path.resolve().parent, seed, k)

    def validate(self) -> None:
        self.map_request()
        self.fit_weights()
        for key, val in self.stages.items():
            if not isinstance(val, bool):
                raise ManifestError(f"stages.{key} must be true or false")
        for key, val in self.paths.items():
            if not isinstance(val, str) or not val:
                raise ManifestError(f"paths.{key} must be a non-empty string")
        if not isinstance(self.maps["mask_maps"], bool):
            raise ManifestError("maps.mask_maps must be true or false")
        f = self.fit
        if not isinstance(f["iters"], int) or f["iters"] < 1:
            raise ManifestError("fit.iters must be a positive integer")
        if not isinstance(f["min_landmarks"], int) or f["min_landmarks"] < 3:
            raise ManifestError("fit.min_landmarks must be an integer >= 3")
        b = self.bake
        if not isinstance(b["resolution"], int) or not 8 <= b["resolution"] <= 8192:
            raise ManifestError("bake.resolution must be an integer in [8, 8192]")
        if b["weighting"] not in WEIGHTINGS:
            raise ManifestError(f"bake.weighting must be one of {WEIGHTINGS}")
        known = set(MAP_NAMES) | {DIFFUSE}
        for sec in ("bake", "eval"):
            names = getattr(self, sec)["maps"]
            if not isinstance(names, list) or not set(names) <= known:
                raise ManifestError(f"{sec}.maps must be a list drawn from {sorted(known)}")
        if self.synth["frame_bits"] not in (8, 16):
            raise ManifestError("synth.frame_bits must be 8 or 16")
        subs = self.report["subjects"]
        if not isinstance(subs, list) or not all(isinstance(s, str) and s for s in subs):
            raise ManifestError("report.subjects must be a list of subject names")

    def map_request(self) -> MapRequest:
        mp = {k: v for k, v in self.maps.items() if k != "mask_maps"}
        try:
            return MapRequest(**mp)
        except TypeError as exc:
            raise ManifestError(f"bad maps section: {exc}") from exc

    def fit_weights(self) -> FitWeights:
        w = self.fit["weights"]
        known = {f.name for f in fields(FitWeights)}
        if not isinstance(w, dict) or not set(w) <= known:
            raise ManifestError(f"fit.weights keys must be drawn from {sorted(known)}")
        return FitWeights(**w)

    def normalized(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "subject": self.subject, "root": self.root,
               "seed": self.seed, "fps": self.fps,
               "views": None if self.views is None else list(self.views)}
        for s in DEFAULTS:
            out[s] = getattr(self, s)
        return out

    @property
    def hash(self) -> str:
        return hashlib.sha256(wio.dumps(self.normalized()).encode("utf-8")).hexdigest()

    @property
    def root_dir(self) -> Path:
        return (self.base_dir / self.root)

    @property
    def subject_dir(self) -> Path:
        return self.root_dir / self.subject

    def path(self, key: str) -> Path:
        return self.subject_dir / self.paths[key]

    def provenance(self) -> dict:
        return {"tool": "pulsemap3d", "tool_version": __version__,
                "manifest_hash": self.hash, "seed": self.seed}


# --------------------------------------------------------------------------
# workspace helpers


def view_name(v: int) -> str:
    return f"{int(v):02d}"


def write_meta(path: Path, m: RunManifest, **extra) -> None:
    """Provenance sidecar ``<file>.meta.json`` for non-map artifacts."""
    meta = m.provenance()
    meta["file"] = path.name
    meta.update(extra)
    wio.write_json(path.parent / f"{path.name}.meta.json", meta)


def write_report(path: Path, m: RunManifest, body: dict) -> None:
    out = dict(body)
    out["provenance"] = m.provenance()
    wio.write_json(path, out)


def run_pool(fn, items, workers: int) -> list:
    """Ordered map over ``items``; results never depend on ``workers``."""
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def load_cameras(m: RunManifest) -> list[CameraParams]:
    cams = wio.read_cameras(m.path("cameras"))
    ids = [c.view_id for c in cams]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate view_id in cameras file")
    cams = sorted(cams, key=lambda c: c.view_id)
    if m.views is not None:
        missing = set(m.views) - set(ids)
        if missing:
            raise ValidationError(f"manifest views {sorted(missing)} not in cameras file")
        cams = [c for c in cams if c.view_id in m.views]
    if not cams:
        raise ValidationError("no views selected")
    return cams


def load_fitted_mesh(m: RunManifest) -> TriMesh:
    mesh = wio.load_obj(m.path("fit") / "fitted.obj")
    if mesh.uvs is None:
        raise ValidationError("fitted mesh carries no UV coordinates")
    return mesh


def map_stem(m: RunManifest, view: int, name: str) -> Path:
    return m.path("maps") / view_name(view) / name


def skin_mask_path(m: RunManifest, view: int) -> Path:
    skin = m.path("masks") / f"{view_name(view)}_skin.png"
    return skin if skin.is_file() else m.path("masks") / f"{view_name(view)}.png"


# --------------------------------------------------------------------------
# synth


def cmd_synth(m: RunManifest, workers: int = 1, scenario_path: str | None = None) -> dict:
    from .morphfit.synthetic import synthetic_head
    from .synthoracle import SynthScenario, contact_ppg, render_scenario

    src = scenario_path or m.synth["scenario_file"]
    if src is not None:
        p = Path(src)
        data = wio.read_json(p if p.is_absolute() or scenario_path else m.base_dir / p)
    else:
        data = m.synth["scenario"]
    if not isinstance(data, dict):
        raise ValidationError("scenario must be a JSON object")
    sc = SynthScenario.from_dict(data)
    if abs(sc.fps - m.fps) > 1e-9:
        raise ValidationError(f"scenario fps {sc.fps} differs from manifest fps {m.fps}")
    views = None if m.views is None else [v for v in m.views if v < sc.n_views]
    frames, gt = render_scenario(sc, m.seed, views)
    sub = m.subject_dir
    sub.mkdir(parents=True, exist_ok=True)
    bits = m.synth["frame_bits"]
    prov = m.provenance()

    # surface-region skin mask per view
    skin_faces = np.ones(gt.mesh.n_faces, dtype=bool)
    head = None
    if sc.geometry == "head":
        head = synthetic_head()
        skin_v = head.skin_region
        skin_faces = skin_v[gt.mesh.faces].all(axis=1)

    def render_view(i: int) -> None:
        fr, cam, ras = frames[i], gt.cameras[i], gt.rasters[i]
        vn = view_name(cam.view_id)
        out = m.path("frames") / vn
        out.mkdir(parents=True, exist_ok=True)
        for f in range(fr.n_frames):
            wio.write_frame(out / wio.FRAME_PATTERN.format(f), fr.frame(f), bits)
        write_meta(out / "frames", m, view_id=cam.view_id, n_frames=fr.n_frames,
                   bit_depth=bits, fps=fr.fs)
        wio.write_mask(m.path("masks") / f"{vn}.png", ras.hit)
        skin = ras.hit & skin_faces[np.maximum(ras.face_id, 0)]
        wio.write_mask(m.path("masks") / f"{vn}_skin.png", skin)
        vm = gt.view_maps[i]
        for key in ("amp", "phase", "snr_proxy"):
            wio.write_map(m.path("ground_truth") / "views" / vn / f"gt_{key}", vm[key],
                          wio.map_sidecar(f"gt_{key}", cam.view_id, None, _gt_units(key), **prov))

    run_pool(render_view, range(len(frames)), workers)
    for mask_file in sorted(m.path("masks").glob("*.png")):
        write_meta(mask_file, m)
    wio.write_cameras(m.path("cameras"), gt.cameras)
    write_meta(m.path("cameras"), m)
    wio.save_obj(m.path("scan"), gt.mesh)
    write_meta(m.path("scan"), m, geometry=sc.geometry)
    for key, arr in gt.texel_maps.items():
        wio.write_map(m.path("ground_truth") / "texture" / f"gt_{key}", arr,
                      wio.map_sidecar(f"gt_{key}", None, None, _gt_units(key),
                                      resolution=sc.texture_resolution, **prov))
    write_report(m.path("ground_truth") / "scenario.json", m,
                 {"scenario": sc.to_dict(), "hr_hz": sc.hr_hz, "hr_bpm": sc.hr_bpm})
    written = {"views": [c.view_id for c in gt.cameras]}
    if head is not None:
        model = head.model
        model.meta["regions"] = {"skin": [int(i) for i in np.flatnonzero(head.skin_region)]}
        m.path("model").parent.mkdir(parents=True, exist_ok=True)
        model.save(m.path("model"))
        write_meta(m.path("model"), m)
        lmk3d = gt.mesh.vertices[model.landmark_vertex_ids]
        lv = m.synth["landmark_views"]
        if lv is None:
            centre = min(gt.cameras, key=lambda c: abs(c.view_id - (sc.n_views - 1) / 2))
            lv = [centre.view_id]
        for i, cam in enumerate(gt.cameras):
            if cam.view_id in lv:
                pts = _visible_projection(lmk3d, gt.rasters[i], cam, gt.mesh)
                path = m.path("landmarks") / f"{view_name(cam.view_id)}.json"
                wio.write_landmarks(path, cam.view_id, pts)
                write_meta(path, m)
    if m.synth["contact_ppg"]:
        t, v = contact_ppg(sc, m.seed)
        wio.write_contact_csv(m.path("contact_ppg"), t, v)
        write_meta(m.path("contact_ppg"), m)
    return written


def _gt_units(key: str) -> str:
    return {"amp": "1", "phase": "rad", "snr_proxy": "dB"}[key]


def _visible_projection(pts: np.ndarray, raster, cam: CameraParams, mesh: TriMesh) -> np.ndarray:
    """Pixel positions of ``pts``; NaN where the point is hidden or off-image."""
    u, v, z = cam.project(pts)
    out = np.full((len(pts), 2), np.nan)
    tol = 1e-3 * mesh.bbox_diagonal()
    for i in range(len(pts)):
        c, r = int(np.floor(u[i] + 0.5)), int(np.floor(v[i] + 0.5))
        if not (z[i] > 0 and 0 <= r < cam.height and 0 <= c < cam.width):
            continue
        if raster.face_id[r, c] >= 0 and z[i] <= raster.depth[r, c] + tol:
            out[i] = (u[i], v[i])
    return out


# --------------------------------------------------------------------------
# maps


def cmd_maps(m: RunManifest, workers: int = 1) -> dict:
    """Pulse maps per view; views run in order, each using ``workers`` threads."""
    cams = load_cameras(m)
    req = m.map_request()
    contact = None
    if m.path("contact_ppg").is_file():
        contact = wio.read_contact_csv(m.path("contact_ppg"))
    summary = {}
    prov = m.provenance()
    for cam in cams:
        vn = view_name(cam.view_id)
        mask_path = m.path("masks") / f"{vn}.png"
        mask = wio.read_mask(mask_path)
        frames = wio.PngFrames(m.path("frames") / vn, m.fps)
        if (frames.height, frames.width) != (cam.height, cam.width):
            raise ValidationError(f"view {vn}: frames are {frames.height}x{frames.width}, "
                                  f"camera expects {cam.height}x{cam.width}")
        if mask.shape != (frames.height, frames.width):
            raise ValidationError(f"{mask_path}: mask shape {mask.shape} != frame shape")
        ref = reference_signal(frames, mask, req.pad_factor)
        pm = window_maps(frames, req, ref, cam.view_id, workers,
                         mask=mask if m.maps["mask_maps"] else None)
        for name, arr in pm.maps().items():
            wio.write_map(map_stem(m, cam.view_id, name), arr,
                          wio.map_sidecar(name, cam.view_id, req.k, **prov))
        wio.write_map(map_stem(m, cam.view_id, VALID), pm.valid.astype(np.float64),
                      wio.map_sidecar(VALID, cam.view_id, req.k, units="1", **prov))
        diffuse = temporal_mean(frames, int(round(req.total_len_s * frames.fs)))
        if m.maps["mask_maps"]:
            diffuse = np.where(mask, diffuse, np.nan)
        wio.write_map(map_stem(m, cam.view_id, DIFFUSE), diffuse,
                      wio.map_sidecar(DIFFUSE, cam.view_id, None, units="1", channel="g", **prov))
        body = {"view_id": cam.view_id, "hr_ref_hz": ref.hr_ref_hz, "hr_ref_bpm": ref.hr_ref_bpm,
                "n_valid": int(pm.valid.sum()), "k": req.k}
        if contact is not None:
            t, vals = contact
            ppg = signal_from_timestamps(t - t[0], vals)
            body["contact_validation"] = validate_reference(ref, ppg).to_dict()
        write_report(m.path("maps") / vn / "reference.json", m, body)
        summary[vn] = body
    return summary


def temporal_mean(frames, n: int, channel: int = 1) -> np.ndarray:
    acc = np.zeros((frames.height, frames.width))
    for _, block in iter_blocks(frames, 0, n):
        acc += block[..., channel].sum(axis=0)
    return acc / n


# --------------------------------------------------------------------------
# fit


def cmd_fit(m: RunManifest, workers: int = 1) -> dict:
    model_path = wio.require_file(m.path("model"), "model file")
    try:
        model = MorphableModel.load(model_path)
    except ValidationError as exc:
        raise InputError(str(exc), path=str(model_path)) from exc
    scan = wio.load_obj(m.path("scan"))
    cams = {c.view_id: c for c in wio.read_cameras(m.path("cameras"))}
    lmk_dir = m.path("landmarks")
    files = sorted(lmk_dir.glob("*.json")) if lmk_dir.is_dir() else []
    files = [f for f in files if not f.name.endswith(".meta.json")]
    if not files:
        raise InputError(f"no landmark files in {lmk_dir}", path=str(lmk_dir))
    n_l = model.landmark_vertex_ids.size
    lmk3d = np.full((n_l, 3), np.nan)

    def lift(f: Path):
        vid, pts = wio.read_landmarks(f)
        if vid not in cams:
            raise ValidationError(f"{f}: view {vid} not in cameras file")
        if len(pts) != n_l:
            raise ValidationError(f"{f}: {len(pts)} landmarks, model defines {n_l}")
        cam = cams[vid]
        return backproject_landmarks(pts, rasterize(scan, cam), scan, cam)

    for hits in run_pool(lift, files, workers):
        take = hits.found & ~np.all(np.isfinite(lmk3d), axis=1)
        lmk3d[take] = hits.points[take]
    found = np.all(np.isfinite(lmk3d), axis=1)
    if found.sum() < m.fit["min_landmarks"]:
        raise DegenerateConfiguration(
            f"only {int(found.sum())} landmarks land on the scan; need {m.fit['min_landmarks']}")

    clean, shift = clean_scan(scan, lmk3d[found])
    lmk_c = lmk3d + shift
    s, R, T = rigid_align(model.mean_vertices[model.landmark_vertex_ids[found]], lmk_c[found])
    init = FitState.zeros(model, s, R, T)
    res = fit_scan(model, clean, init, m.fit_weights(), m.fit["iters"], scan_landmarks=lmk_c,
                   graduated=m.fit["graduated"])
    fitted_c = evaluate_model(model, res.state)
    fitted = fitted_c.with_vertices(fitted_c.vertices - shift)

    out = m.path("fit")
    wio.save_obj(out / "fitted.obj", fitted)
    write_meta(out / "fitted.obj", m)
    state = res.to_dict()
    state["scan_translation_mm"] = [float(x) for x in shift]
    state["landmarks_found"] = int(found.sum())
    write_report(out / "fit_state.json", m, state)

    region = None
    regions = model.meta.get("regions", {}) if isinstance(model.meta, dict) else {}
    if "skin" in regions:
        region = np.zeros(model.n_vertices, dtype=bool)
        region[np.asarray(regions["skin"], dtype=np.int64)] = True
    err_all = mesh_to_scan_error(fitted, scan)
    err = mesh_to_scan_error(fitted, scan, region) if region is not None else err_all
    diag = scan.bbox_diagonal()
    body = {"all_vertices": err_all.to_dict(), "region": "skin" if region is not None else "all",
            "region_stats": err.to_dict(), "bbox_diagonal_mm": diag,
            "p95_fraction_of_diagonal": err.p95 / diag, "objective": res.objective}
    write_report(m.path("reports") / "mesh_to_scan.json", m, body)
    wio.write_map(out / "mesh_to_scan_mm", err_all.per_vertex_mm[None, :],
                  wio.map_sidecar("mesh_to_scan", None, None, units="mm", **m.provenance()))
    return body


# --------------------------------------------------------------------------
# bake


def cmd_bake(m: RunManifest, workers: int = 1) -> dict:
    mesh = load_fitted_mesh(m)
    cams = load_cameras(m)
    names = m.bake["maps"]
    sources = {name: [wio.read_map(map_stem(m, c.view_id, name))[0] for c in cams]
               for name in names}
    lookup = uv_lookup(mesh, m.bake["resolution"])
    plans = run_pool(lambda c: plan_view(mesh, c, lookup), cams, workers)
    prov = m.provenance()
    out = {}
    for name in names:
        tex = UvTextureMap.empty(lookup.resolution, name, phase_average=m.maps["phase_average"])
        for cam, plan, src in zip(cams, plans, sources[name]):
            tex = bake_view(src, mesh, cam, tex, weighting=m.bake["weighting"], plan=plan)
        wio.write_texture(m.path("textures") / name, tex,
                          dict(prov, views=[c.view_id for c in cams], weighting=m.bake["weighting"]))
        out[name] = int(tex.valid.sum())
    for png in sorted(m.path("textures").glob("*.png")):
        write_meta(png, m)
    return out


# --------------------------------------------------------------------------
# eval


def cmd_eval(m: RunManifest, workers: int = 1) -> dict:
    mesh = load_fitted_mesh(m)
    cams = load_cameras(m)
    names = m.eval["maps"]
    textures = {n: wio.read_texture(m.path("textures") / n) for n in names}
    rasters = run_pool(lambda c: rasterize(mesh, c), cams, workers)
    skins = [wio.read_mask(skin_mask_path(m, c.view_id)) for c in cams]
    prov = m.provenance()
    rep_dir = m.path("reports")
    reports = {}
    for name in names:
        src = [wio.read_map(map_stem(m, c.view_id, name))[0] for c in cams]
        rep = reprojection_error(textures[name], mesh, cams, src, skins, rasters)
        reports[name] = rep
        write_report(rep_dir / f"reprojection_{name}.json", m, rep.to_dict())
        csv_path = rep_dir / f"reprojection_{name}.csv"
        csv_path.write_text(rep.to_csv(), encoding="utf-8")
        write_meta(csv_path, m)
        for vid, err in rep.error_maps.items():
            wio.write_map(rep_dir / "error_maps" / name / view_name(vid), err,
                          wio.map_sidecar(f"reprojection_error_{name}", vid, None,
                                          units=_error_units(name), **prov))

    ref_name = m.eval["reference_map"]
    dep = {}
    if ref_name in reports:
        for name, rep in reports.items():
            if name == ref_name:
                continue
            dep[name] = {}
            for kind in ("full", "skin"):
                a = getattr(rep, f"rms_{kind}")()
                b = getattr(reports[ref_name], f"rms_{kind}")()
                try:
                    dep[name][kind] = dependency_analysis(a, b).to_dict()
                except ValidationError as exc:
                    dep[name][kind] = {"skipped": str(exc)}
        write_report(rep_dir / "dependency.json", m, {"reference_map": ref_name, "maps": dep})

    out = {"reprojection": {n: r.to_dict() for n, r in reports.items()}, "dependency": dep}
    corr = snr_correlation(m, cams, textures.get("snr"))
    if corr is not None:
        write_report(rep_dir / "snr_correlation.json", m, corr)
        out["snr_correlation"] = corr
    return out


def _error_units(name: str) -> str:
    from .pulsemaps import MAP_UNITS

    return MAP_UNITS.get(name, "1")


def _safe_pearson(x, y) -> float | None:
    try:
        return pearson(x, y)
    except ValidationError:
        return None


def snr_correlation(m: RunManifest, cams: list[CameraParams], tex: UvTextureMap | None
                    ) -> dict | None:
    """Pearson r of the per-view SNR maps and the baked SNR texture against
    the ground-truth SNR proxy, when the workspace holds ground truth."""
    gt_dir = m.path("ground_truth")
    if tex is None or not gt_dir.is_dir():
        return None
    per_view = []
    for c in cams:
        stem = gt_dir / "views" / view_name(c.view_id) / "gt_snr_proxy"
        snr2d = wio.read_map(map_stem(m, c.view_id, "snr"))[0]
        gt2d = wio.read_map(stem)[0]
        per_view.append({"view_id": c.view_id, "r": _safe_pearson(snr2d, gt2d)})
    gt_tex, meta = wio.read_map(gt_dir / "texture" / "gt_snr_proxy")
    if gt_tex.shape != (tex.resolution, tex.resolution):
        raise ValidationError(f"ground-truth texture is {gt_tex.shape[0]}^2 texels, "
                              f"baked texture {tex.resolution}^2")
    r_tex = _safe_pearson(np.where(tex.valid, tex.value, np.nan), gt_tex)
    rs = [p["r"] for p in per_view if p["r"] is not None]
    exceeds = bool(r_tex is not None and rs and all(r_tex > r for r in rs))
    return {"per_view": per_view, "texture_r": r_tex, "texture_exceeds_all_views": exceeds}


# --------------------------------------------------------------------------
# report


def cmd_report(m: RunManifest, workers: int = 1) -> dict:
    from .evalstats import aggregate_textures

    rep_dir = m.path("reports")
    if not rep_dir.is_dir():
        raise InputError(f"missing reports directory: {rep_dir}", path=str(rep_dir))
    summary: dict = {"subject": m.subject}
    refs = sorted(m.path("maps").glob("*/reference.json")) if m.path("maps").is_dir() else []
    summary["reference"] = [_strip(wio.read_json(p)) for p in refs]
    for key in ("mesh_to_scan", "dependency", "snr_correlation"):
        p = rep_dir / f"{key}.json"
        if p.is_file():
            summary[key] = _strip(wio.read_json(p))
    rows = []
    repro = {}
    for p in sorted(rep_dir.glob("reprojection_*.json")):
        if p.name.endswith(".meta.json"):
            continue
        d = _strip(wio.read_json(p))
        name = d["semantic"]
        vals_f = [v["rms_full"] for v in d["views"] if v["rms_full"] is not None]
        vals_s = [v["rms_skin"] for v in d["views"] if v["rms_skin"] is not None]
        repro[name] = {"mean_rms_full": float(np.mean(vals_f)) if vals_f else None,
                       "mean_rms_skin": float(np.mean(vals_s)) if vals_s else None}
        for v in d["views"]:
            rows.append((v["view_id"], name, v["rms_full"], v["rms_skin"]))
    summary["reprojection"] = repro
    csv_lines = ["view_id,map,rms_full,rms_skin"]
    for vid, name, rf, rs in sorted(rows):
        csv_lines.append(f"{vid},{name},{_csv_num(rf)},{_csv_num(rs)}")
    (rep_dir / "summary.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    write_meta(rep_dir / "summary.csv", m)

    subjects = [m.subject] + [s for s in m.report["subjects"] if s != m.subject]
    if len(subjects) >= 2:
        agg_dir = m.root_dir / "aggregate"
        agg = {}
        for name in m.bake["maps"]:
            texs = [wio.read_texture(m.root_dir / s / m.paths["textures"] / name)
                    for s in subjects]
            mean, std = aggregate_textures(texs, name)
            prov = dict(m.provenance(), subjects=subjects)
            wio.write_map(agg_dir / f"{name}_mean", mean,
                          wio.map_sidecar(name, None, None, **prov))
            wio.write_map(agg_dir / f"{name}_std", std,
                          wio.map_sidecar(f"{name}_std", None, None,
                                          units=_error_units(name), **prov))
            agg[name] = int(np.isfinite(mean).sum())
        summary["aggregate"] = {"subjects": subjects, "valid_texels": agg}
    write_report(rep_dir / "summary.json", m, summary)
    return summary


def _strip(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "provenance"}


def _csv_num(x) -> str:
    return "nan" if x is None else repr(float(x))


# --------------------------------------------------------------------------
# entry point

COMMANDS = {
    "synth": cmd_synth, "maps": cmd_maps, "fit": cmd_fit,
    "bake": cmd_bake, "eval": cmd_eval, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", default=argparse.SUPPRESS,
                        help="run manifest JSON (required)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="worker threads (default 1); never changes outputs")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the manifest seed")
    common.add_argument("--k", type=int, default=argparse.SUPPRESS,
                        help="override the spatial window size maps.k")
    p = argparse.ArgumentParser(prog="pulsemap3d", parents=[common],
                                description="3D pulsation maps from multi-view video.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "render a synthetic ground-truth workspace",
        "maps": "compute per-view pulse maps",
        "fit": "fit the morphable model to the scan",
        "bake": "bake per-view maps into UV textures",
        "eval": "reprojection, dependency and correlation reports",
        "report": "summarise reports (and aggregate across subjects)",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "synth":
            sp.add_argument("scenario", nargs="?", help="scenario JSON (overrides the manifest)")
    return p


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
           "path": getattr(exc, "path", None) or getattr(exc, "filename", None)}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    opts = vars(args)
    if "manifest" not in opts:
        return _fail(ValidationError("--manifest is required"), EXIT_VALIDATION)
    workers = opts.get("workers", 1)
    try:
        if workers < 1:
            raise ValidationError("--workers must be >= 1")
        m = RunManifest.load(opts["manifest"], seed=opts.get("seed"), k=opts.get("k"))
        if not m.stages.get(args.command, True):
            result = {"skipped": f"stage {args.command!r} disabled in manifest"}
        elif args.command == "synth":
            result = cmd_synth(m, workers, opts.get("scenario"))
        else:
            result = COMMANDS[args.command](m, workers)
    except (InputError, OSError) as exc:
        return _fail(exc, EXIT_IO)
    except PulseMapError as exc:
        return _fail(exc, EXIT_VALIDATION)
    sys.stdout.write(json.dumps({"command": args.command, "result": _brief(result)},
                                sort_keys=True, default=str) + "\n")
    return 0


def _brief(result):
    if isinstance(result, dict) and "reprojection" in result:
        return {k: v for k, v in result.items() if k != "reprojection"}
    return result


if __name__ == "__main__":
    raise SystemExit(main())

"""Synthetic multi-view pulsatile scenes with exact ground truth.

Pixel intensity of channel ``c`` in view ``v`` at time ``t``::

    I = L(v, p) * albedo_c * (1 + a(p) * gain_c * sin(2 pi f t - phi(p)))
        + specular(v, p, t) + noise

``a`` and ``phi`` are functions of the surface UV coordinate, so every view
sees the same surface parameters. ``phi`` is a lag: a pixel whose modulation
trails the reference by ``phi`` is recovered with phase ``+phi``. Noise is
drawn from a generator seeded by ``(seed, view, frame)``, so any block of
frames can be rendered independently and reproduces bit-exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import InvalidScenario
from .geometry.camera import CameraParams, make_camera
from .geometry.mesh import TriMesh, grid_plane, uv_sphere
from .geometry.raster import RasterResult, rasterize
from .geometry.texture import uv_lookup
from .pulsemaps import wrap_phase

GEOMETRIES = ("plane", "sphere", "head")
LIGHTS = ("diffuse", "ringlight")
PATCH_KINDS = ("inversion", "scratch-boost", "blemish-drop")
PERTURBATION_FACTORS = {"scratch-boost": 2.0, "blemish-drop": 0.2}
# cutaneous blood pulsation direction in normalised RGB (per POS), green = 1
DEFAULT_PULSE_GAIN = (0.43, 1.0, 0.69)
NECK_V_MAX = 0.17


@dataclass(frozen=True)
class Specular:
    """Image-space Gaussian highlight anchored to a view (``view_id=None``: all views).

    ``flicker`` is the relative standard deviation of a white temporal
    fluctuation of the highlight strength.
    """

    center_px: tuple[float, float]
    sigma_px: float
    strength: float
    view_id: int | None = None
    flicker: float = 0.0


@dataclass(frozen=True)
class SynthScenario:
    geometry: str = "head"
    hr_bpm: float = 72.0
    fps: float = 30.0
    duration_s: float = 70.0
    width: int = 160
    height: int = 128
    n_views: int = 23
    view_step_deg: float = 15.0
    distance_mm: float = 450.0
    fov_deg: float = 45.0
    amp: float = 0.01
    amp_variation: float = 0.0
    phase_rad: float = 0.0
    phase_ramp_rad: float = 0.0
    noise_sigma: float = 0.0
    light: str = "diffuse"
    light_level: float = 1.0
    ring_center_px: tuple[float, float] | None = None
    ring_falloff: float = 2.0
    albedo: tuple[float, float, float] = (0.75, 0.55, 0.45)
    pulse_gain: tuple[float, float, float] = DEFAULT_PULSE_GAIN
    background: float = 0.05
    specular: tuple[Specular, ...] = ()
    patches: tuple[dict, ...] = ()
    texture_resolution: int = 256
    min_duration_s: float = 20.0
    # head geometry: shape coefficients drawn as head_beta_scale * N(0, 1)
    head_beta_scale: float = 0.0

    def __post_init__(self) -> None:
        def bad(msg: str) -> None:
            raise InvalidScenario(msg)

        if self.geometry not in GEOMETRIES:
            bad(f"geometry must be one of {GEOMETRIES}")
        if not 30.0 <= self.hr_bpm <= 200.0:
            bad(f"hr_bpm {self.hr_bpm} outside [30, 200]")
        if not self.fps > 0:
            bad("fps must be positive")
        if not self.duration_s >= self.min_duration_s:
            bad(f"duration {self.duration_s} s shorter than {self.min_duration_s} s")
        if self.hr_bpm / 60.0 * 2 >= self.fps / 2:
            bad("fps too low for the pulse harmonic")
        if self.width < 8 or self.height < 8:
            bad("image must be at least 8x8")
        if self.n_views < 1:
            bad("n_views must be >= 1")
        if self.amp < 0 or self.amp_variation < 0 or self.amp * (1 + self.amp_variation) * 2 >= 1:
            bad("amplitude out of range")
        if self.noise_sigma < 0 or self.light_level <= 0 or self.background <= 0:
            bad("noise_sigma >= 0, light_level > 0 and background > 0 required")
        if self.light not in LIGHTS:
            bad(f"light must be one of {LIGHTS}")
        if min(self.albedo) <= 0:
            bad("albedo must be positive")
        if self.distance_mm <= 0 or not 1.0 < self.fov_deg < 170.0:
            bad("bad camera distance or field of view")
        if self.head_beta_scale < 0:
            bad("head_beta_scale must be >= 0")
        if self.texture_resolution < 8:
            bad("texture_resolution must be >= 8")
        spec = tuple(s if isinstance(s, Specular) else Specular(**s) for s in self.specular)
        for s in spec:
            if s.sigma_px <= 0 or s.strength < 0 or s.flicker < 0:
                bad("specular needs sigma_px > 0, strength >= 0, flicker >= 0")
        object.__setattr__(self, "specular", spec)
        patches = tuple(dict(p) for p in self.patches)
        for p in patches:
            if p.get("kind") not in PATCH_KINDS:
                bad(f"patch kind must be one of {PATCH_KINDS}")
            if p["kind"] != "inversion" and (p.get("radius", -1) < 0 or len(p.get("center", ())) != 2):
                bad("perturbation patch needs center [u, v] and radius >= 0")
        object.__setattr__(self, "patches", patches)
        for name in ("albedo", "pulse_gain"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.ring_center_px is not None:
            object.__setattr__(self, "ring_center_px", tuple(float(x) for x in self.ring_center_px))

    @property
    def hr_hz(self) -> float:
        return self.hr_bpm / 60.0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.fps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["specular"] = [asdict(s) for s in self.specular]
        d["patches"] = [dict(p) for p in self.patches]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthScenario":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidScenario(f"unknown scenario keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidScenario(str(exc)) from exc

    # ----- injected surface parameters (functions of UV)

    def amp_at(self, uv: np.ndarray) -> np.ndarray:
        u, v = uv[..., 0], uv[..., 1]
        a = self.amp * (1 + self.amp_variation * np.cos(4 * np.pi * u) * np.cos(3 * np.pi * v))
        for p in self.patches:
            if p["kind"] in PERTURBATION_FACTORS and p["radius"] > 0:
                cu, cv = p["center"]
                inside = (u - cu) ** 2 + (v - cv) ** 2 <= p["radius"] ** 2
                a = np.where(inside, a * PERTURBATION_FACTORS[p["kind"]], a)
        return a

    def phase_at(self, uv: np.ndarray) -> np.ndarray:
        u, v = uv[..., 0], uv[..., 1]
        phi = self.phase_rad + self.phase_ramp_rad * 2 * (u - 0.5)
        for p in self.patches:
            if p["kind"] == "inversion":
                phi = np.where(self.inversion_region(uv, p), phi + np.pi, phi)
        return wrap_phase(phi)

    @staticmethod
    def inversion_region(uv: np.ndarray, p: dict) -> np.ndarray:
        u, v = uv[..., 0], uv[..., 1]
        u0, v0, u1, v1 = p.get("rect", (0.0, 0.0, 1.0, NECK_V_MAX))
        return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


def neck_inversion_patch(sc: SynthScenario, rect: tuple[float, float, float, float] | None = None
                         ) -> SynthScenario:
    """Invert the modulation sign (phase + pi) in a UV rectangle ``(u0, v0, u1, v1)``.

    The default rectangle is the band ``v <= 0.17``: the neck of the head model
    (latitude below about -59 degrees) and the bottom strip of a plane.
    """
    patch = {"kind": "inversion", "rect": list(rect or (0.0, 0.0, 1.0, NECK_V_MAX))}
    return replace(sc, patches=sc.patches + (patch,))


def perturbation_patch(sc: SynthScenario, kind: str, center: tuple[float, float] = (0.5, 0.5),
                       radius: float = 0.08) -> SynthScenario:
    """Scale the pulse amplitude in a UV disk by 2.0 (scratch) or 0.2 (blemish)."""
    if kind not in PERTURBATION_FACTORS:
        raise InvalidScenario(f"kind must be one of {tuple(PERTURBATION_FACTORS)}")
    if radius == 0:
        return sc
    patch = {"kind": kind, "center": [float(center[0]), float(center[1])], "radius": float(radius)}
    return replace(sc, patches=sc.patches + (patch,))


# --------------------------------------------------------------------------
# scene construction


def head_beta(sc: SynthScenario, n_beta: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0xBE7A])
    return sc.head_beta_scale * rng.standard_normal(n_beta)


def scenario_mesh(sc: SynthScenario, seed: int = 0) -> TriMesh:
    """Scene surface. The head is the synthetic morphable model with shape
    coefficients from :func:`head_beta` and neutral pose and expression."""
    if sc.geometry == "plane":
        return grid_plane(200.0, 160.0, 8, 8)
    if sc.geometry == "sphere":
        return uv_sphere(100.0, 24, 48)
    from .morphfit.model import FitState, evaluate_model
    from .morphfit.synthetic import synthetic_head

    model = synthetic_head().model
    if sc.head_beta_scale == 0:
        return model.mesh()
    state = FitState.zeros(model).copy(beta=head_beta(sc, model.n_beta, seed))
    return evaluate_model(model, state)


def scenario_cameras(sc: SynthScenario) -> list[CameraParams]:
    """Views on a horizontal arc around the origin, ``view_step_deg`` apart and
    centred on the +z direction."""
    cams = []
    for i in range(sc.n_views):
        ang = np.deg2rad((i - (sc.n_views - 1) / 2) * sc.view_step_deg)
        eye = sc.distance_mm * np.array([np.sin(ang), 0.0, np.cos(ang)])
        cams.append(make_camera(eye, (0.0, 0.0, 0.0), sc.width, sc.height, sc.fov_deg, view_id=i))
    return cams


def light_field(sc: SynthScenario, cam: CameraParams) -> np.ndarray:
    """Light level per pixel: constant for diffuse light; for a ring light
    ``L0 * (1 + r^2 / f^2) ** (-falloff / 2)`` with ``r`` the pixel distance
    to the ring centre (default: principal point), i.e. ``cos^falloff`` of
    the ray angle."""
    if sc.light == "diffuse":
        return np.full((cam.height, cam.width), sc.light_level)
    cu, cv = sc.ring_center_px if sc.ring_center_px is not None else (cam.cx, cam.cy)
    vv, uu = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    r2 = ((uu - cu) ** 2 + (vv - cv) ** 2) / (cam.fx * cam.fy)
    return sc.light_level * (1 + r2) ** (-sc.ring_falloff / 2)


def specular_profile(sc: SynthScenario, cam: CameraParams) -> list[tuple[np.ndarray, float]]:
    vv, uu = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    out = []
    for s in sc.specular:
        if s.view_id is not None and s.view_id != cam.view_id:
            continue
        prof = s.strength * np.exp(-((uu - s.center_px[0]) ** 2 + (vv - s.center_px[1]) ** 2)
                                   / (2 * s.sigma_px ** 2))
        out.append((prof, s.flicker))
    return out


class SynthFrames:
    """Lazily rendered frame sequence of one view (implements FrameSequence)."""

    def __init__(self, sc: SynthScenario, cam: CameraParams, raster: RasterResult,
                 uv: np.ndarray, seed: int):
        self.sc, self.cam, self.seed = sc, cam, int(seed)
        self.fs = float(sc.fps)
        self.n_frames = sc.n_frames
        self.height, self.width = cam.height, cam.width
        self.view_id = cam.view_id
        hit = raster.hit
        self.hit = hit
        self.light = light_field(sc, cam)
        albedo = np.asarray(sc.albedo)
        gain = np.asarray(sc.pulse_gain)
        self.base = np.zeros((self.height, self.width, 3))
        self.base[hit] = self.light[hit][:, None] * albedo
        self.base[~hit] = sc.background
        self.amp = np.full((self.height, self.width), np.nan)
        self.phase = np.full((self.height, self.width), np.nan)
        self.amp[hit] = sc.amp_at(uv[hit])
        self.phase[hit] = sc.phase_at(uv[hit])
        self.pulse = np.zeros((self.height, self.width, 3))
        self.pulse[hit] = self.base[hit] * self.amp[hit][:, None] * gain
        self.spec = specular_profile(sc, cam)
        self._hit_idx = np.flatnonzero(hit.ravel())

    def read(self, start: int, stop: int) -> np.ndarray:
        if not 0 <= start < stop <= self.n_frames:
            raise IndexError(f"frame range [{start}, {stop}) outside [0, {self.n_frames})")
        out = np.empty((stop - start, self.height, self.width, 3))
        w = 2 * np.pi * self.sc.hr_hz
        for i, f in enumerate(range(start, stop)):
            out[i] = self.frame(f, w)
        return out

    def frame(self, f: int, w: float | None = None) -> np.ndarray:
        w = 2 * np.pi * self.sc.hr_hz if w is None else w
        t = f / self.fs
        img = self.base.copy()
        s = np.sin(w * t - self.phase.ravel()[self._hit_idx])
        img.reshape(-1, 3)[self._hit_idx] += self.pulse.reshape(-1, 3)[self._hit_idx] * s[:, None]
        rng = np.random.default_rng([self.seed, self.view_id, f])
        for prof, flicker in self.spec:
            level = 1.0 + (flicker * rng.standard_normal() if flicker > 0 else 0.0)
            img += (prof * level)[..., None]
        if self.sc.noise_sigma > 0:
            img += self.sc.noise_sigma * self.sc.light_level * rng.standard_normal(img.shape)
        return img


@dataclass
class GroundTruthBundle:
    hr_hz: float
    cameras: list[CameraParams]
    mesh: TriMesh
    view_maps: list[dict[str, np.ndarray]]
    texel_maps: dict[str, np.ndarray]
    pulse: np.ndarray  # true pulse waveform sin(2 pi f t) at the frame rate
    rasters: list[RasterResult] = field(default_factory=list)

    def skin_mask(self, view: int) -> np.ndarray:
        return self.view_maps[view]["mask"]


def snr_proxy_db(amp: np.ndarray) -> np.ndarray:
    """Ground-truth SNR proxy: ``20 log10`` of the injected amplitude. Under
    fixed noise this differs from the expected map SNR by a constant."""
    with np.errstate(divide="ignore"):
        return 20 * np.log10(amp)


def render_scenario(sc: SynthScenario, seed: int = 0, views: list[int] | None = None
                    ) -> tuple[list[SynthFrames], GroundTruthBundle]:
    """Lazy frames for every view plus the exact injected ground truth."""
    mesh = scenario_mesh(sc, seed)
    cams = scenario_cameras(sc)
    if views is not None:
        cams = [cams[i] for i in views]
    frames, view_maps, rasters = [], [], []
    for cam in cams:
        r = rasterize(mesh, cam)
        uv = r.surface_uvs(mesh)
        fr = SynthFrames(sc, cam, r, uv, seed)
        frames.append(fr)
        rasters.append(r)
        amp = fr.amp
        view_maps.append({
            "mask": r.hit.copy(),
            "amp": amp,
            "phase": fr.phase,
            "snr_proxy": snr_proxy_db(amp),
            "light": np.where(r.hit, fr.light, np.nan),
        })
    lookup = uv_lookup(mesh, sc.texture_resolution)
    R = sc.texture_resolution
    c = (np.arange(R) + 0.5) / R
    uu, vv = np.meshgrid(c, c)
    tuv = np.stack([uu, vv], axis=-1)
    cov = lookup.covered
    tex_amp = np.where(cov, sc.amp_at(tuv), np.nan)
    tex_phase = np.where(cov, sc.phase_at(tuv), np.nan)
    texel_maps = {"amp": tex_amp, "phase": tex_phase, "snr_proxy": snr_proxy_db(tex_amp)}
    pulse = np.sin(2 * np.pi * sc.hr_hz * np.arange(sc.n_frames) / sc.fps)
    gt = GroundTruthBundle(sc.hr_hz, cams, mesh, view_maps, texel_maps, pulse, rasters)
    return frames, gt


def contact_ppg(sc: SynthScenario, seed: int = 0, fs: float = 100.0, t0_unix: float = 1.7e9,
                noise: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Contact PPG samples ``(t_unix_s, value)`` covering the scenario span."""
    t = np.arange(int(round(sc.duration_s * fs)) + 1) / fs
    rng = np.random.default_rng([seed, 0x5050])
    v = np.sin(2 * np.pi * sc.hr_hz * t) + noise * rng.standard_normal(t.size)
    return t0_unix + t, v


def default_scenario() -> SynthScenario:
    """23 views at 15 degree steps, 30 FPS, 70 s, 160 x 128 pixels."""
    return SynthScenario()

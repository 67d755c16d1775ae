from __future__ import annotations

import numpy as np
import pytest

from pulsemap3d.errors import InvalidScenario
from pulsemap3d.synthoracle import (
    Specular,
    SynthScenario,
    contact_ppg,
    default_scenario,
    neck_inversion_patch,
    perturbation_patch,
    render_scenario,
)


def plane(**kw):
    base = dict(geometry="plane", duration_s=20.0, width=16, height=12, n_views=1,
                distance_mm=260.0, texture_resolution=32)
    base.update(kw)
    return SynthScenario(**base)


def test_pixel_spectrum_peaks_at_injected_rate():
    # 70 s at 72 BPM is 84 whole periods, so the rate lands on an exact FFT bin
    sc = SynthScenario(geometry="plane", duration_s=70.0, width=8, height=8, n_views=1,
                       distance_mm=260.0, texture_resolution=16)
    frames, gt = render_scenario(sc)
    fr = frames[0]
    y, x = np.argwhere(gt.skin_mask(0))[0]
    g = np.array([fr.frame(f)[y, x, 1] for f in range(fr.n_frames)])
    spec = np.abs(np.fft.rfft(g - g.mean())) ** 2
    freqs = np.fft.rfftfreq(g.size, 1 / sc.fps)
    assert freqs[np.argmax(spec)] == pytest.approx(72 / 60, abs=1e-12)


def test_ring_light_closed_form():
    sc = plane(light="ringlight", ring_falloff=3.0, light_level=0.8)
    frames, gt = render_scenario(sc)
    fr, cam = frames[0], gt.cameras[0]
    img = fr.frame(0)
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    theta = np.arctan(np.hypot((uu - cam.cx) / np.sqrt(cam.fx * cam.fy),
                               (vv - cam.cy) / np.sqrt(cam.fx * cam.fy)))
    L = 0.8 * np.cos(theta) ** 3.0
    hit = gt.skin_mask(0)
    # frame 0: sin(-phi) with phi = 0 leaves only the diffuse term
    expect = L[hit] * sc.albedo[0]
    assert np.max(np.abs(img[hit, 0] - expect)) < 1e-6


def test_noise_is_seeded_and_block_independent():
    sc = plane(noise_sigma=0.01)
    a = render_scenario(sc, seed=3)[0][0]
    b = render_scenario(sc, seed=3)[0][0]
    c = render_scenario(sc, seed=4)[0][0]
    assert np.array_equal(a.read(0, 10), b.read(0, 10))
    assert np.array_equal(a.read(0, 10)[5:], b.read(5, 10))
    assert not np.array_equal(a.read(0, 3), c.read(0, 3))


def test_neck_inversion_texture():
    sc = neck_inversion_patch(plane())
    _, gt = render_scenario(sc)
    ph = gt.texel_maps["phase"]
    R = sc.texture_resolution
    v = (np.arange(R) + 0.5) / R
    inside = np.isfinite(ph) & (v[:, None] <= 0.17)
    outside = np.isfinite(ph) & (v[:, None] > 0.17)
    assert inside.any() and outside.any()
    assert np.allclose(np.abs(ph[inside]), np.pi)
    assert np.allclose(ph[outside], 0.0)


def test_zero_radius_perturbation_is_identity():
    sc = plane()
    assert perturbation_patch(sc, "scratch-boost", radius=0.0) == sc
    with pytest.raises(InvalidScenario):
        perturbation_patch(sc, "inversion")


def test_perturbation_scales_amplitude():
    sc = perturbation_patch(plane(amp=0.01), "blemish-drop", center=(0.5, 0.5), radius=0.1)
    a = sc.amp_at(np.array([[0.5, 0.5], [0.9, 0.9]]))
    assert a[0] == pytest.approx(0.002) and a[1] == pytest.approx(0.01)


@pytest.mark.parametrize("kw", [dict(hr_bpm=250.0), dict(duration_s=10.0), dict(width=4),
                                dict(amp=0.6), dict(geometry="cube"), dict(light="sun"),
                                dict(specular=({"center_px": (1, 1), "sigma_px": 0, "strength": 1},))])
def test_invalid_scenarios(kw):
    with pytest.raises(InvalidScenario):
        plane(**kw)


def test_from_dict_round_trip_and_unknown_key():
    sc = plane(specular=(Specular((4.0, 4.0), 2.0, 0.1, flicker=0.2),))
    assert SynthScenario.from_dict(sc.to_dict()) == sc
    d = sc.to_dict()
    d["colour"] = "red"
    with pytest.raises(InvalidScenario):
        SynthScenario.from_dict(d)


def test_ground_truth_matches_injected_parameters():
    sc = plane(amp=0.02, amp_variation=0.3, phase_rad=0.4, phase_ramp_rad=0.5)
    frames, gt = render_scenario(sc)
    hit = gt.skin_mask(0)
    uv = gt.rasters[0].surface_uvs(gt.mesh)
    assert np.array_equal(gt.view_maps[0]["amp"][hit], sc.amp_at(uv[hit]))
    assert np.array_equal(gt.view_maps[0]["phase"][hit], sc.phase_at(uv[hit]))
    assert np.all(np.isnan(gt.view_maps[0]["amp"][~hit]))
    # green trace of one pixel is the injected sinusoid
    y, x = np.argwhere(hit)[len(np.argwhere(hit)) // 2]
    t = np.arange(60) / sc.fps
    g = frames[0].read(0, 60)[:, y, x, 1]
    base = sc.light_level * sc.albedo[1]
    model = base * (1 + gt.view_maps[0]["amp"][y, x] * sc.pulse_gain[1]
                    * np.sin(2 * np.pi * sc.hr_hz * t - gt.view_maps[0]["phase"][y, x]))
    assert np.max(np.abs(g - model)) < 1e-12


def test_default_scenario_shape():
    sc = default_scenario()
    assert (sc.n_views, sc.fps, sc.duration_s, sc.width, sc.height) == (23, 30.0, 70.0, 160, 128)
    assert sc.n_frames == 2100


def test_contact_ppg_span():
    t, v = contact_ppg(plane(), fs=50.0)
    assert t[-1] - t[0] == pytest.approx(20.0) and t.size == v.size

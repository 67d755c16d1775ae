from __future__ import annotations

import numpy as np
import pytest

from pulsemap3d import posext
from pulsemap3d import pulsemaps as pm
from pulsemap3d import signalcore as sc
from pulsemap3d.errors import EmptyMask, Infeasible, LengthMismatch, ValidationError, ZeroSignal
from pulsemap3d.frames import ArrayFrames
from pulsemap3d.synthoracle import SynthScenario, render_scenario

from oracles import brute_snr_db

FS = 30.0


def test_snr_matches_explicit_dft(rng):
    t = np.arange(600) / FS
    for _ in range(3):
        hr = rng.uniform(0.8, 2.5)
        x = np.sin(2 * np.pi * hr * t) + rng.uniform(0.3, 2.0) * rng.standard_normal(600)
        got = pm.snr(sc.ScalarSignal(x, FS), pm.SnrWindow(hr))
        assert abs(got - brute_snr_db(x, FS, hr)) < 0.1


def test_snr_negative_when_off_rate():
    t = np.arange(600) / FS
    x = np.sin(2 * np.pi * (1.2 + 20 / 60) * t)
    assert pm.snr(sc.ScalarSignal(x, FS), pm.SnrWindow(1.2)) < 0


def test_snr_clamps_empty_denominator():
    power = np.zeros(100)
    freqs = np.arange(100) * 0.05
    power[24] = 1.0  # 1.2 Hz
    db, clamped = pm.snr_from_power(power, freqs, pm.SnrWindow(1.2))
    assert db == pm.SNR_CLAMP_DB and clamped


def test_snr_zero_signal():
    with pytest.raises(ZeroSignal):
        pm.snr(sc.ScalarSignal(np.zeros(600), FS), pm.SnrWindow(1.2))


def test_snr_tolerance_units_are_bpm():
    w = pm.SnrWindow(1.2)
    f = np.array([1.2 + 5.9 / 60, 1.2 + 6.1 / 60, 2.4 + 11.9 / 60, 2.4 + 12.1 / 60])
    assert w.signal_mask(f).tolist() == [True, False, True, False]


def _ref(n=600, f=1.2):
    t = np.arange(n) / FS
    return sc.scale_reference(sc.analytic(sc.ScalarSignal(np.cos(2 * np.pi * f * t), FS)))


def test_phase_amplitude_self_projection():
    ref = _ref()
    s = sc.ScalarSignal(ref.samples.real, FS)
    ph, amp = pm.phase_amplitude(s, ref)
    assert abs(ph) < 1e-6
    assert amp == pytest.approx(1.0, abs=1e-9)


def test_phase_amplitude_sign_flip_and_quarter_shift():
    ref = _ref()
    ph, _ = pm.phase_amplitude(sc.ScalarSignal(-ref.samples.real, FS), ref)
    assert abs(abs(ph) - np.pi) < 1e-9
    t = np.arange(600) / FS
    ph, _ = pm.phase_amplitude(sc.ScalarSignal(np.sin(2 * np.pi * 1.2 * t), FS), ref)
    assert abs(abs(ph) - np.pi / 2) < np.deg2rad(1)


def test_phase_amplitude_length_mismatch():
    with pytest.raises(LengthMismatch):
        pm.phase_amplitude(sc.ScalarSignal(np.ones(10), FS), _ref(12))


def test_segment_slices():
    s = pm.segment_slices(70, 20, 7, 30)
    assert s[0] == (0, 600) and s[1] == (250, 850) and s[-1] == (1500, 2100)
    assert all(b - a == 600 for a, b in s)
    assert pm.segment_slices(20, 20, 1, 30) == [(0, 600)]
    with pytest.raises(Infeasible):
        pm.segment_slices(10, 20, 7, 30)


def test_map_request_requires_odd_k():
    with pytest.raises(ValidationError):
        pm.MapRequest(k=4)


def test_wrap_phase_range():
    x = np.array([-np.pi, np.pi, 3 * np.pi, -3 * np.pi + 1e-3, 0.0])
    w = pm.wrap_phase(x)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert w[0] == pytest.approx(np.pi)


def test_box_mean_matches_loop(rng):
    block = rng.random((2, 7, 9, 3))
    k = 3
    out = pm.box_mean(block, k)
    for y in range(5):
        for x in range(7):
            assert np.allclose(out[:, y, x], block[:, y:y + k, x:x + k].mean(axis=(1, 2)))


@pytest.fixture(scope="module")
def small_scene():
    sc_ = SynthScenario(geometry="plane", duration_s=22.0, width=24, height=20, n_views=1,
                        noise_sigma=0.002, distance_mm=260.0, phase_ramp_rad=1.0,
                        texture_resolution=32)
    frames, gt = render_scenario(sc_, seed=5)
    fr = frames[0]
    arr = ArrayFrames(fr.read(0, fr.n_frames), FS)
    mask = gt.skin_mask(0)
    ref = posext.reference_signal(arr, mask)
    req = pm.MapRequest(k=3, segment_len_s=20.0, n_segments=2, total_len_s=22.0)
    return arr, mask, ref, req, gt


def test_window_maps_masked_equals_unmasked(small_scene):
    arr, mask, ref, req, _ = small_scene
    full = pm.window_maps(arr, req, ref)
    m = mask.copy()
    m[:, :8] = False
    part = pm.window_maps(arr, req, ref, mask=m)
    nocache = pm.window_maps(arr, req, ref, mask=m, cache_bytes=0)
    assert np.array_equal(part.valid, full.valid & m)
    for name in pm.MAP_NAMES:
        a, b, c = full.channel(name), part.channel(name), nocache.channel(name)
        v = part.valid
        assert np.array_equal(a[v], b[v])
        assert np.array_equal(b, c, equal_nan=True)
        assert np.all(np.isnan(b[~v]))


def test_window_maps_border_invalid(small_scene):
    arr, _, ref, req, _ = small_scene
    out = pm.window_maps(arr, req, ref)
    assert not out.valid[0].any() and not out.valid[:, -1].any()
    assert out.valid[1:-1, 1:-1].all()


def test_window_maps_recovers_phase_ramp(small_scene):
    arr, mask, ref, req, gt = small_scene
    out = pm.window_maps(arr, req, ref, mask=mask)
    v = out.valid
    # phases are relative to the face reference; remove the common offset
    err = np.angle(np.exp(1j * (out.channel("phase_g") - gt.view_maps[0]["phase"])))[v]
    err = np.angle(np.exp(1j * (err - np.angle(np.mean(np.exp(1j * err))))))
    assert np.median(np.abs(err)) < np.deg2rad(5)
    assert np.all(np.abs(out.hr_hz[v] * 60 - 72) <= 1.0)


def test_window_maps_worker_invariance(small_scene):
    arr, mask, ref, req, _ = small_scene
    a = pm.window_maps(arr, req, ref, mask=mask, workers=1)
    b = pm.window_maps(arr, req, ref, mask=mask, workers=3)
    for name in pm.MAP_NAMES:
        assert np.array_equal(a.channel(name), b.channel(name), equal_nan=True)


def test_window_maps_constant_frames_all_invalid(small_scene):
    arr, _, ref, req, _ = small_scene
    const = ArrayFrames(np.full((arr.n_frames, 20, 24, 3), 0.5), FS)
    out = pm.window_maps(const, req, ref)
    assert not out.valid.any()


def test_window_maps_empty_mask(small_scene):
    arr, _, ref, req, _ = small_scene
    with pytest.raises(EmptyMask):
        pm.window_maps(arr, req, ref, mask=np.zeros((20, 24), bool))

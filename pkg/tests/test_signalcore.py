from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from pulsemap3d import signalcore as sc
from pulsemap3d.errors import DegenerateReference, InvalidBand, NonPositiveBaseline, TooShort


FS = 30.0


def tone(f, n, fs=FS, phase=0.0):
    return np.sin(2 * np.pi * f * np.arange(n) / fs + phase)


def test_detrend_normalize_is_gain_invariant(rng):
    x = 2.0 + 0.01 * tone(1.2, 600) + 0.001 * rng.standard_normal(600)
    a = sc.detrend_normalize(sc.ScalarSignal(x, FS)).samples
    b = sc.detrend_normalize(sc.ScalarSignal(3.7 * x, FS)).samples
    assert np.max(np.abs(a - b)) < 1e-12


def test_detrend_normalize_constant_gives_zeros():
    out = sc.detrend_normalize(sc.ScalarSignal(np.full(300, 0.4), FS))
    assert np.max(np.abs(out.samples)) < 1e-12
    # the first and last second are flagged, not trimmed
    assert out.low_confidence.sum() == 60 and len(out) == 300


def test_detrend_normalize_rejects_nonpositive_baseline():
    with pytest.raises(NonPositiveBaseline):
        sc.detrend_normalize(sc.ScalarSignal(np.zeros(300), FS))


def test_bandpass_matches_filter_response():
    # zero-phase filtering applies |H(f)|^2 without phase shift; the oracle is
    # the frequency response of the same design evaluated by sosfreqz
    n = 3000
    for f in (0.6, 1.2, 3.0):
        x = tone(f, n)
        y = sc.bandpass(sc.ScalarSignal(x, FS), 0.4, 4.0).samples
        sos = sps.butter(4, [0.4, 4.0], btype="band", fs=FS, output="sos")
        _, h = sps.sosfreqz(sos, worN=[f], fs=FS)
        gain = abs(h[0]) ** 2
        mid = slice(600, n - 600)
        assert np.max(np.abs(y[mid] - gain * x[mid])) < 2e-3


def test_bandpass_rejects_out_of_band():
    y = sc.bandpass(sc.ScalarSignal(tone(10.0, 3000), FS), 0.4, 4.0).samples
    assert np.max(np.abs(y[600:-600])) < 1e-3


@pytest.mark.parametrize("band", [(0.0, 4.0), (4.0, 0.4), (1.0, 15.0), (-1.0, 2.0)])
def test_invalid_band(band):
    with pytest.raises(InvalidBand):
        sc.bandpass(sc.ScalarSignal(tone(1.0, 300), FS), *band)


def test_padded_length():
    assert sc.padded_length(600) == 4 * 1024
    assert sc.padded_length(512) == 4 * 512
    assert sc.padded_length(600, pad_factor=1) == 1024


def test_spectrum_peak_and_resolution():
    s = sc.ScalarSignal(tone(1.2, 2100), FS)
    spec = sc.power_spectrum(s)
    assert spec.freq_resolution == pytest.approx(FS / sc.padded_length(2100))
    assert abs(sc.peak_frequency(spec, 0.5, 3.33) - 1.2) <= spec.freq_resolution / 2


def test_analytic_of_cosine_is_exponential():
    n = 300
    t = np.arange(n) / FS
    # an integer number of cycles makes the FFT Hilbert transform exact
    x = np.cos(2 * np.pi * 1.0 * t)
    z = sc.analytic(sc.ScalarSignal(x, FS)).samples
    assert np.max(np.abs(z - np.exp(2j * np.pi * 1.0 * t))) < 1e-10


def test_analytic_too_short():
    with pytest.raises(TooShort):
        sc.analytic(sc.ScalarSignal(np.ones(4), FS))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-np.pi, np.pi), st.floats(0.01, 100.0))
def test_reference_scale_unit_projection(seed, rot, mag):
    r = np.random.default_rng(seed)
    z = r.standard_normal(200) + 1j * r.standard_normal(200)
    z *= mag * np.exp(1j * rot)
    a = sc.reference_scale(z)
    w = a * z
    assert abs(np.sum(w.real * w) - 1.0) < 1e-9


def test_reference_scale_of_analytic_signal_is_positive_real():
    s = sc.ScalarSignal(tone(1.1, 600), FS)
    z = sc.analytic(s).samples
    a = sc.reference_scale(z)
    assert abs(a.imag) < 1e-12 and a.real > 0


def test_reference_scale_degenerate():
    with pytest.raises(DegenerateReference):
        sc.reference_scale(np.zeros(10, dtype=complex))


def test_signal_types_validate():
    with pytest.raises(Exception):
        sc.ScalarSignal(np.array([1.0, np.nan, 2.0]), FS)
    with pytest.raises(Exception):
        sc.RgbSignal(np.ones((10, 2)), FS)
    rgb = sc.RgbSignal(np.ones((10, 3)), FS)
    assert len(rgb.channel(1)) == 10

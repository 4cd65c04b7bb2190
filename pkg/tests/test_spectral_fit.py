import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resolveq import (
    FitFailure,
    FitFlag,
    ReflectionTrace,
    ValidationError,
    circle_fit_resonance,
    fit_to_measurement,
    synthesize_reflection,
)
from resolveq.spectral_fit import (
    ResonanceFit,
    linewidth_grid,
    loaded_q,
    read_trace_csv,
    read_trace_json,
    taubin_circle,
    write_trace_csv,
)

ENV = (0.8, 0.7, 42e-9)


def trace_for(f0, q_int, q_c, phi=0.0, env=(1.0, 0.0, 0.0), noise=0.0, seed=None, n=201):
    grid = linewidth_grid(f0, loaded_q(q_int, q_c, phi), n)
    return synthesize_reflection(f0, q_int, q_c, phi, env, noise, grid, rng=seed)


def test_critical_coupling_dips_to_zero():
    trace = synthesize_reflection(5e9, 1e6, 1e6, freq_grid=np.linspace(5e9 - 1e4, 5e9 + 1e4, 201))
    assert abs(trace.s11[100]) < 1e-12


def test_decoupled_limit_is_environment_only():
    f = np.linspace(7e9, 7.001e9, 64)
    trace = synthesize_reflection(7.0005e9, 1e6, math.inf, 0.0, ENV, freq_grid=f)
    expected = ENV[0] * np.exp(1j * ENV[1]) * np.exp(-2j * np.pi * f * ENV[2])
    assert np.allclose(trace.s11, expected, rtol=0, atol=1e-14)


def test_e3eb_tm310_diameter():
    f0, q_int, q_c = 11.588e9, 1.08e8, 1.21e8
    trace = trace_for(f0, q_int, q_c)
    _, radius = taubin_circle(trace.s11)
    q_l = 1 / (1 / q_int + 1 / q_c)
    assert 2 * radius == pytest.approx(2 * q_l / q_c, rel=1e-9)
    fit = circle_fit_resonance(trace)
    assert 2 * fit.circle_radius == pytest.approx(2 * q_l / q_c, rel=1e-6)


@pytest.mark.parametrize("q_int", [1e5, 1e7, 1e9])
@pytest.mark.parametrize("ratio", [0.1, 1.0, 10.0])
def test_noiseless_round_trip(q_int, ratio):
    f0, q_c, phi = 6.3e9, q_int * ratio, 0.15
    fit = circle_fit_resonance(trace_for(f0, q_int, q_c, phi, ENV))
    assert fit.f0 == pytest.approx(f0, rel=1e-9)
    assert fit.q_int == pytest.approx(q_int, rel=1e-3)
    assert fit.q_c_mag == pytest.approx(q_c, rel=1e-3)
    assert fit.phi == pytest.approx(phi, abs=1e-3)
    assert fit.q_loaded == pytest.approx(loaded_q(q_int, q_c, phi), rel=1e-3)
    assert fit.amplitude == pytest.approx(ENV[0], rel=1e-3)
    assert fit.tau == pytest.approx(ENV[2], rel=1e-3)
    assert not fit.flags


def _noisy_q_int(q_int, q_c, seeds=100, env=ENV):
    f0 = 5.2e9
    q_l = loaded_q(q_int, q_c)
    noise = 0.01 * 2 * q_l / q_c
    fits = [circle_fit_resonance(trace_for(f0, q_int, q_c, 0.0, env, noise, seed)) for seed in range(seeds)]
    return np.array([f.q_int for f in fits]), np.array([f.errors["q_int"] for f in fits])


def test_noise_recovery_critical_coupling():
    q, err = _noisy_q_int(1e6, 1e6)
    assert np.std(q) / 1e6 < 0.02
    assert abs(np.mean(q) / 1e6 - 1) < 0.005
    # reported errors describe the scatter
    assert np.median(err) == pytest.approx(np.std(q), rel=0.3)


def test_noise_recovery_billion_q():
    q, _ = _noisy_q_int(1e9, 4.7e9)
    assert np.std(q) / 1e9 < 0.02
    assert abs(np.mean(q) / 1e9 - 1) < 0.005
    assert np.all(q > 0.9e9)


@given(st.floats(-5e6, 5e6))
@settings(max_examples=20)
def test_frequency_shift_equivariance(shift):
    f0, q_int, q_c = 8e9, 2e6, 3e6
    base = circle_fit_resonance(trace_for(f0, q_int, q_c, 0.1, (1.0, 0.3, 0.0), 2e-3, 3))
    grid = linewidth_grid(f0, loaded_q(q_int, q_c, 0.1)) + shift
    rng = np.random.default_rng(3)
    noise = 2e-3 * (rng.standard_normal(201) + 1j * rng.standard_normal(201))
    clean = synthesize_reflection(f0 + shift, q_int, q_c, 0.1, (1.0, 0.3, 0.0), 0.0, grid)
    moved = circle_fit_resonance(ReflectionTrace(grid, clean.s11 + noise))
    assert moved.f0 - shift == pytest.approx(base.f0, rel=1e-9)
    assert moved.q_int == pytest.approx(base.q_int, rel=1e-3)
    assert moved.q_c_mag == pytest.approx(base.q_c_mag, rel=1e-3)


@given(st.floats(0.01, 100), st.floats(-math.pi, math.pi))
@settings(max_examples=20)
def test_complex_scale_invariance(scale, angle):
    trace = trace_for(4e9, 5e5, 8e5, -0.2, ENV, 3e-3, 9)
    base = circle_fit_resonance(trace)
    factor = scale * complex(math.cos(angle), math.sin(angle))
    scaled = circle_fit_resonance(ReflectionTrace(trace.frequencies, trace.s11 * factor))
    for name in ("q_int", "q_c_mag", "q_loaded"):
        assert getattr(scaled, name) == pytest.approx(getattr(base, name), rel=1e-3)


def test_random_noise_is_not_a_circle():
    rng = np.random.default_rng(0)
    f = np.linspace(5e9, 5.001e9, 201)
    with pytest.raises(FitFailure) as info:
        circle_fit_resonance(ReflectionTrace(f, rng.standard_normal(201) + 1j * rng.standard_normal(201)))
    assert "residual_rms" in info.value.diagnostics


def test_off_resonance_span_flag():
    f0, q_int, q_c = 5e9, 1e6, 1e6
    f = np.linspace(f0 + 2e4, f0 + 6e4, 101)
    fit = circle_fit_resonance(synthesize_reflection(f0, q_int, q_c, freq_grid=f))
    assert FitFlag.OFF_RESONANCE_SPAN in fit.flags


def test_undercoupled_extreme_flag():
    fit = circle_fit_resonance(trace_for(5e9, 1e6, 1e9))
    assert FitFlag.UNDERCOUPLED_EXTREME in fit.flags


def _fit(q_int, rel_err):
    return ResonanceFit(f0=5e9, q_loaded=q_int / 2, q_c_mag=q_int, phi=0.0, q_int=q_int,
                        errors={"q_int": rel_err * q_int}, residual_rms=0.0, amplitude=1.0,
                        alpha=0.0, tau=0.0, circle_radius=0.5)


def test_fit_to_measurement_max_rule():
    assert fit_to_measurement(_fit(1e6, 0.01)).q_int_rel_sigma == 0.05
    assert fit_to_measurement(_fit(1e6, 0.08)).q_int_rel_sigma == pytest.approx(0.08)
    assert fit_to_measurement(_fit(1e6, 0.013), eps_floor=0).q_int_rel_sigma == pytest.approx(0.013)
    m = fit_to_measurement(_fit(1e6, 0.01), label="TE011", photon_number=1e3)
    assert (m.label, m.frequency, m.q_int, m.q_c, m.photon_number) == ("TE011", 5e9, 1e6, 1e6, 1e3)


def test_fit_to_measurement_rejects_failed_fit():
    bad = ResonanceFit(5e9, 1e6, 1e6, 0.0, -1e6, {"q_int": 1.0}, 0.0, 1.0, 0.0, 0.0, 0.5,
                       frozenset({FitFlag.NONPOSITIVE_QINT}))
    with pytest.raises(ValidationError):
        fit_to_measurement(bad)


def test_trace_validation():
    f = np.linspace(1, 2, 40)
    with pytest.raises(ValidationError):
        ReflectionTrace(f[:10], np.ones(10))
    with pytest.raises(ValidationError):
        ReflectionTrace(f[::-1], np.ones(40))
    with pytest.raises(ValidationError):
        ReflectionTrace(f, np.full(40, np.nan))
    with pytest.raises(ValidationError):
        synthesize_reflection(5e9, -1.0, 1e6, freq_grid=f)


def test_trace_csv_round_trip(tmp_path):
    trace = trace_for(5e9, 1e6, 2e6, 0.1, ENV, 1e-3, 4)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    back = read_trace_csv(path)
    assert np.array_equal(back.frequencies, trace.frequencies)
    assert np.array_equal(back.s11, trace.s11)


def test_trace_json_forms(tmp_path):
    trace = trace_for(5e9, 1e6, 2e6)
    columns = {"frequency_hz": trace.frequencies.tolist(), "re_s11": trace.s11.real.tolist(),
               "im_s11": trace.s11.imag.tolist(), "metadata": {"photon_number": 12.0}}
    (tmp_path / "a.json").write_text(json.dumps(columns))
    records = [{"frequency_hz": f, "re_s11": s.real, "im_s11": s.imag}
               for f, s in zip(trace.frequencies, trace.s11)]
    (tmp_path / "b.json").write_text(json.dumps(records))
    a, b = read_trace_json(tmp_path / "a.json"), read_trace_json(tmp_path / "b.json")
    assert a.metadata == {"photon_number": 12.0}
    assert np.array_equal(a.s11, trace.s11) and np.array_equal(b.s11, trace.s11)
    (tmp_path / "c.json").write_text(json.dumps({"frequency_hz": [1]}))
    with pytest.raises(ValidationError):
        read_trace_json(tmp_path / "c.json")


def test_overcoupled_noise_envelope():
    # Q_c = Q_int / 10: the circle is nearly full-size and Q_int only enters
    # through a small difference, so 1% diameter noise costs a few percent.
    q, err = _noisy_q_int(1e6, 1e5)
    assert np.std(q) / 1e6 < 0.05
    assert abs(np.mean(q) / 1e6 - 1) < 0.01
    assert np.median(err) == pytest.approx(np.std(q), rel=0.3)


def test_undercoupled_noise_recovery():
    q, _ = _noisy_q_int(1e7, 1e8)
    assert np.std(q) / 1e7 < 0.02

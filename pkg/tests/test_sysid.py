import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopmag.errors import DegenerateDrive, IllConditioned, NonlinearRegime
from loopmag.loopshape import butterworth1, synthesize_controller
from loopmag.looprun import Scenario
from loopmag.physim import FieldWaveform, PhysParams, effective_plant, reference_plant
from loopmag.sysid import (
    SWEEP_HEADER,
    SweepPlan,
    fit_rational,
    robustness_sweep,
    swept_sine,
    sweep_table_csv,
)
from loopmag.tfcore import FrequencyResponse, RationalTF, tf_evaluate

PLANT = reference_plant()
QUIET = PhysParams(noise_psd=0.0)
TRUTH = {"gain": 1.6e4, "zero": 8e5, "den1": 4.1e5, "den0": 4e9}


def _params(tf):
    """(gain, zero, s^1 and s^0 denominator coefficients) of k (z - s)/(s^2 + a1 s + a0)."""
    num, den = tf.num, tf.den
    return {"gain": -num[1], "zero": -num[0] / num[1], "den1": den[1], "den0": den[0]}


@pytest.fixture(scope="module")
def quiet_sweep():
    return swept_sine(Scenario(params=QUIET), SweepPlan())


def _exact(omega, tf=PLANT):
    return FrequencyResponse(omega, np.array([tf_evaluate(tf, w) for w in omega]))


# swept sine -----------------------------------------------------------------------


def test_swept_sine_matches_plant():
    plan = SweepPlan(frequencies=tuple(np.geomspace(100, 3e5, 30)))
    res = swept_sine(Scenario(params=QUIET), plan)
    ratio = res.response.values / np.array([tf_evaluate(PLANT, w) for w in res.response.omega])
    assert np.max(np.abs(np.abs(ratio) - 1)) < 0.02
    assert np.max(np.abs(np.degrees(np.angle(ratio)))) < 2.0
    assert np.all(res.coherence > 0.999)
    assert res.max_excursion <= 0.05


def test_swept_sine_linearized_consistency():
    """Simulated physics agrees with the linearised plant at another atom number."""
    n = 3e8
    plan = SweepPlan(frequencies=tuple(np.geomspace(100, 1e5, 15)))
    res = swept_sine(Scenario(params=QUIET, n_atoms=n), plan)
    model = effective_plant(QUIET, n)
    ratio = res.response.values / np.array([tf_evaluate(model, w) for w in res.response.omega])
    assert np.max(np.abs(np.abs(ratio) - 1)) < 0.03
    assert np.max(np.abs(np.degrees(np.angle(ratio)))) < 3.0


def test_zero_drive_rejected():
    with pytest.raises(DegenerateDrive):
        SweepPlan(drive_amplitude=0.0)


def test_plan_validation():
    with pytest.raises(ValueError):
        SweepPlan(frequencies=(1e3, 1e2))
    with pytest.raises(ValueError):
        SweepPlan(measure_cycles=3)


def test_large_drive_trips_linearity_guard():
    with pytest.raises(NonlinearRegime):
        swept_sine(Scenario(params=QUIET), SweepPlan(frequencies=(1e3,), drive_amplitude=1.0))


def test_coherence_falls_with_drive():
    plan = lambda a: SweepPlan(
        frequencies=(2e3, 2e4), drive_amplitude=a, settle_cycles=0, min_settle=0.0, min_measure=2e-4
    )
    means = []
    for a in (1e-3, 1e-4, 1e-5):
        c = [swept_sine(Scenario(seed=s), plan(a)).coherence for s in range(10)]
        means.append(np.mean(c, axis=0))
    means = np.array(means)
    assert np.all(np.diff(means, axis=0) < 0)


def test_reset_matters_little_without_noise():
    plan = SweepPlan(frequencies=(1e4, 5e4, 2e5), reset_between_points=False)
    res = swept_sine(Scenario(params=QUIET), plan)
    ratio = res.response.values / np.array([tf_evaluate(PLANT, w) for w in res.response.omega])
    assert np.max(np.abs(ratio - 1)) < 0.03


# rational fit ---------------------------------------------------------------------


def test_fit_exact_data_recovers_plant():
    fit = fit_rational(_exact(np.geomspace(2 * np.pi * 100, 2 * np.pi * 3e5, 40)), 1, 2, full_output=True)
    got = _params(fit.tf)
    for k, v in TRUTH.items():
        assert got[k] == pytest.approx(v, rel=1e-6)
    assert fit.residual < 1e-10


def test_fit_pure_gain():
    omega = np.geomspace(1, 1e3, 5)
    tf = fit_rational(FrequencyResponse(omega, np.full(5, 2.5 + 0j)), 0, 0)
    assert tf.num == pytest.approx((2.5,), rel=1e-14)
    assert tf.den == (1.0,)


def test_fit_preconditions():
    omega = np.geomspace(1, 1e3, 5)
    r = FrequencyResponse(omega, np.ones(5, dtype=complex))
    with pytest.raises(ValueError):
        fit_rational(r, 1, 2)
    with pytest.raises(ValueError):
        fit_rational(r, 2, 1)


def test_fit_ill_conditioned():
    # far too many parameters for data that a first-order system explains
    omega = np.geomspace(1, 10, 40)
    tf = RationalTF((1.0,), (1.0, 1.0))
    with pytest.raises(IllConditioned):
        fit_rational(_exact(omega, tf), 6, 8)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e2, 1e5), st.floats(1e2, 1e5), st.floats(0.1, 10.0))
def test_fit_recovers_random_second_order(p1, p2, k):
    tf = RationalTF((k * p1 * p2,), (p1 * p2, p1 + p2, 1.0))
    lo, hi = min(p1, p2) / 30, max(p1, p2) * 30
    fit = fit_rational(_exact(np.geomspace(lo, hi, 30), tf), 0, 2, full_output=True)
    assert fit.residual < 1e-8
    np.testing.assert_allclose(fit.tf.den, tf.den, rtol=1e-6)


def test_identification_round_trip(quiet_sweep):
    fit = fit_rational(quiet_sweep.response, 1, 2)
    ref = np.array([tf_evaluate(PLANT, w) for w in quiet_sweep.response.omega])
    got = np.array([tf_evaluate(fit, w) for w in quiet_sweep.response.omega])
    assert np.max(np.abs(got / ref - 1)) < 0.03
    for k, v in _params(fit).items():
        assert v == pytest.approx(TRUTH[k], rel=0.01)


def test_noisy_fit_within_five_percent():
    got = []
    for seed in range(10):
        res = swept_sine(Scenario(seed=seed), SweepPlan())
        got.append(_params(fit_rational(res.response, 1, 2)))
    for k, v in TRUTH.items():
        assert np.mean([g[k] for g in got]) == pytest.approx(v, rel=0.05)


# robustness sweep -----------------------------------------------------------------


@pytest.fixture(scope="module")
def design():
    return synthesize_controller(PLANT, butterworth1(1e6))


def _base(design, **kw):
    base = dict(
        params=QUIET,
        waveform=FieldWaveform("step", 0.05, start=0.5e-3),
        controller=design,
        feedback_on_at=1e-3,
        duration=5e-3,
    )
    base.update(kw)
    return Scenario(**base)


@pytest.fixture(scope="module")
def decades(design):
    return robustness_sweep(_base(design), [1e6, 1e7, 1e8, 1e9], 1)


def test_sweep_open_loop_scales_with_atoms(decades):
    est = [row.open_b_est[0] for row in decades]
    # the estimate assumes 1e9 atoms, so it scales as n / 1e9
    assert est[-1] / est[0] == pytest.approx(1e3, rel=1e-3)
    opened = [row.open_rms_mean for row in decades]
    assert max(opened) / min(opened) > 100


def test_sweep_closed_loop_flat_across_decades(decades):
    closed = [row.closed_rms_mean for row in decades]
    assert max(closed) / min(closed) < 2


def test_sweep_single_replicate_has_zero_std(design):
    rows = robustness_sweep(_base(design, duration=2e-3), [1e9], 1, error_window=(1e-3, 2e-3))
    assert len(rows) == 1
    assert rows[0].closed_rms_std == 0.0
    assert rows[0].open_rms_std == 0.0


def test_sweep_parallel_matches_serial(design):
    base = _base(design, params=PhysParams(), duration=2e-3)
    kw = dict(error_window=(1e-3, 2e-3))
    serial = robustness_sweep(base, [1e8, 1e9], 3, **kw)
    parallel = robustness_sweep(base, [1e8, 1e9], 3, jobs=2, **kw)
    assert serial == parallel
    assert [r.n for r in parallel] == [1e8, 1e9]
    assert all(r.closed_rms_std > 0 for r in serial)


def test_sweep_records_failed_cells(design):
    rows = robustness_sweep(_base(design, duration=2e-3), [1e10], 2, error_window=(1e-3, 2e-3))
    assert rows[0].failed_cells == 2
    assert math.isnan(rows[0].closed_rms_mean)


def test_sweep_argument_checks(design):
    with pytest.raises(ValueError):
        robustness_sweep(_base(design), [], 1)
    with pytest.raises(ValueError):
        robustness_sweep(_base(design), [1e9], 0)
    with pytest.raises(ValueError):
        robustness_sweep(_base(design, controller=None), [1e9], 1)


def test_sweep_csv(tmp_path, design):
    rows = robustness_sweep(_base(design, duration=2e-3), [1e9], 1, error_window=(1e-3, 2e-3))
    path = tmp_path / "t.csv"
    sweep_table_csv(rows, path, "config_sha256: abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_sha256: abc"
    assert lines[1] == ",".join(SWEEP_HEADER)
    assert float(lines[2].split(",")[0]) == 1e9

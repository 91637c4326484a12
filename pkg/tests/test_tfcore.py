import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from loopmag.errors import DegreeOverflow, EvaluationAtPole
from loopmag.tfcore import (
    MAX_DEGREE,
    FrequencyResponse,
    PoleZeroGain,
    RationalTF,
    S,
    Stability,
    bode,
    continuous_phase_deg,
    is_stable,
    poles_zeros,
    polynomial_roots,
    tf_combine,
    tf_evaluate,
)

PLANT = RationalTF((1.28e10, -1.6e4), (4e9, 4.1e5, 1.0))


def test_normalises_to_monic_denominator():
    tf = RationalTF((2.0, 4.0), (2.0, 2.0, 2.0))
    assert tf.den == (1.0, 1.0, 1.0)
    assert tf.num == (1.0, 2.0)


def test_trims_trailing_zero_coefficients():
    tf = RationalTF((1.0, 0.0, 0.0), (1.0, 1.0, 0.0))
    assert tf.num_degree == 0
    assert tf.den_degree == 1


def test_zero_function_canonical():
    z = RationalTF((0.0, 0.0), (3.0, 1.0))
    assert z.is_zero
    assert z.den == (1.0,)


def test_rejects_zero_denominator_and_nonfinite():
    with pytest.raises(ZeroDivisionError):
        RationalTF((1.0,), (0.0,))
    with pytest.raises(ValueError):
        RationalTF((math.nan,), (1.0,))


def test_degree_bound():
    RationalTF((1.0,), tuple([1.0] * (MAX_DEGREE + 1)))
    with pytest.raises(DegreeOverflow):
        RationalTF((1.0,), tuple([1.0] * (MAX_DEGREE + 2)))


def test_product_degree_overflow():
    big = RationalTF((1.0,), tuple([1.0] + [0.0] * 5 + [1.0]))
    with pytest.raises(DegreeOverflow):
        big * big


def test_variable_s_arithmetic():
    tf = (S + 1) / (S * S + 3 * S + 2)
    # (s+1)/((s+1)(s+2)) cancels to 1/(s+2)
    assert tf.num == pytest.approx((1.0,))
    assert tf.den == pytest.approx((2.0, 1.0))


def test_feedback_of_integrator():
    t = (1 / S).feedback()
    assert t.num == pytest.approx((1.0,))
    assert t.den == pytest.approx((1.0, 1.0))


def test_combine_ops():
    a = RationalTF((1.0,), (1.0, 1.0))
    b = RationalTF((2.0,), (3.0, 1.0))
    assert tf_combine(a, b, "multiply") == a * b
    assert tf_combine(a, b, "add") == a + b
    assert tf_combine(a, b, "unity_feedback") == (a * b).feedback()
    with pytest.raises(ValueError):
        tf_combine(a, b, "divide")


def test_plant_poles_and_zero():
    pz = poles_zeros(PLANT)
    assert sorted(p.real for p in pz.poles) == pytest.approx([-4e5, -1e4], rel=1e-12)
    assert [z.real for z in pz.zeros] == pytest.approx([8e5], rel=1e-12)
    assert pz.gain == pytest.approx(-1.6e4)
    assert pz.to_tf().num == pytest.approx(PLANT.num, rel=1e-12)


def test_dc_value_and_pole_evaluation():
    assert PLANT.dc_value() == pytest.approx(3.2, abs=1e-12)
    with pytest.raises(EvaluationAtPole):
        (1 / S).dc_value()
    with pytest.raises(EvaluationAtPole):
        tf_evaluate(1 / S, 0.0)
    with pytest.raises(ValueError):
        tf_evaluate(PLANT, -1.0)


def test_evaluate_against_scipy_freqs():
    w = np.geomspace(1, 1e7, 50)
    _, h = signal.freqs(PLANT.num[::-1], PLANT.den[::-1], worN=w)
    ours = np.array([tf_evaluate(PLANT, x) for x in w])
    np.testing.assert_allclose(ours, h, rtol=1e-12)


def test_stability_classes():
    assert is_stable(PLANT) is Stability.STABLE
    assert is_stable(1 / S) is Stability.MARGINAL
    assert is_stable(RationalTF((1.0,), (-1.0, 1.0))) is Stability.UNSTABLE


def test_polynomial_roots_conjugate_pairs():
    # (s^2 + 2s + 5)(s + 3)
    roots = polynomial_roots(np.polynomial.polynomial.polymul([5, 2, 1], [3, 1]))
    complex_roots = [r for r in roots if r.imag != 0]
    assert len(complex_roots) == 2
    assert complex_roots[0] == pytest.approx(np.conj(complex_roots[1]))


def test_continuous_phase_of_plant():
    # DC phase 0; zero in RHP and two LHP poles take it to -270 deg
    ph = continuous_phase_deg(PLANT, [1e-3, 1e9])
    assert ph[0] == pytest.approx(0.0, abs=1e-3)
    assert ph[1] == pytest.approx(-270.0, abs=0.1)


def test_continuous_phase_integrator():
    assert continuous_phase_deg(1 / S, [1.0])[0] == pytest.approx(-90.0)
    assert continuous_phase_deg(RationalTF((-1.0,), (1.0, 1.0)), [1e-6])[0] == pytest.approx(-180.0, abs=1e-3)


def test_bode_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        bode(PLANT, [10.0, 1.0])


def test_frequency_response_csv_roundtrip(tmp_path):
    r = bode(PLANT, np.geomspace(10, 1e7, 25))
    path = tmp_path / "r.csv"
    r.to_csv(path, "config_sha256: abc")
    assert path.read_text().startswith("# config_sha256: abc\n")
    back = FrequencyResponse.from_csv(path)
    np.testing.assert_array_equal(back.values, r.values)
    np.testing.assert_array_equal(back.phase_deg, r.phase_deg)


def test_dict_roundtrip_and_strict_keys():
    assert RationalTF.from_dict(PLANT.to_dict()) == PLANT
    with pytest.raises(ValueError):
        RationalTF.from_dict({"num": [1], "den": [1], "gain": 2})


def test_pole_zero_gain_constructor():
    pzg = PoleZeroGain(zeros=(), poles=(-1.0, -2.0), gain=2.0)
    tf = pzg.to_tf()
    assert tf.den == pytest.approx((2.0, 3.0, 1.0))
    assert tf.num == pytest.approx((2.0,))


coef = st.floats(min_value=-10, max_value=10, allow_nan=False).filter(lambda x: abs(x) > 1e-3)
stable_first_order = st.builds(lambda k, p: RationalTF((k,), (p, 1.0)), coef, st.floats(0.1, 100))
omegas = st.floats(min_value=1e-2, max_value=1e3)


@settings(max_examples=60, deadline=None)
@given(stable_first_order, stable_first_order, omegas)
def test_product_evaluates_as_product(a, b, w):
    lhs = tf_evaluate(a * b, w)
    assert lhs == pytest.approx(tf_evaluate(a, w) * tf_evaluate(b, w), rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(stable_first_order, stable_first_order, omegas)
def test_sum_evaluates_as_sum(a, b, w):
    lhs = tf_evaluate(a + b, w)
    assert lhs == pytest.approx(tf_evaluate(a, w) + tf_evaluate(b, w), rel=1e-8, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(stable_first_order, omegas)
def test_feedback_identity(l, w):
    lw = tf_evaluate(l, w)
    if abs(1 + lw) < 1e-6:
        return
    assert tf_evaluate(l.feedback(), w) == pytest.approx(lw / (1 + lw), rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(stable_first_order, omegas)
def test_inverse_identity(a, w):
    assert tf_evaluate(a * a.inv(), w) == pytest.approx(1.0, rel=1e-12)

import math
from fractions import Fraction

import mpmath
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st

from src.components.errors import BudgetExceededError, ValidationError
from src.components.model import (
    GOLDEN_MEAN,
    MAX_DYADIC_EXPONENT,
    TWO_PI,
    ExactDyadic,
    FloatBeta,
    beta_from_dict,
    dyadic_add_pow2,
    make_params,
    parse_beta,
    phase_theta,
    phase_theta_array,
    reduce_angle,
)

dyadics = st.builds(ExactDyadic, st.integers(-(1 << 80), 1 << 80), st.integers(0, 120))


def test_dyadic_is_normalized():
    assert ExactDyadic(12, 4) == ExactDyadic(3, 2)
    assert ExactDyadic(0, 17) == ExactDyadic(0, 0)
    assert ExactDyadic(8, 3) == ExactDyadic(1)


def test_dyadic_increment_is_exact():
    beta = dyadic_add_pow2(ExactDyadic(1), 24)
    assert beta == ExactDyadic((1 << 24) + 1, 24)
    assert beta - ExactDyadic(1) == ExactDyadic.pow2(24)
    assert abs(ExactDyadic(1) - beta) < ExactDyadic.pow2(23)


def test_dyadic_exponent_limits():
    with pytest.raises(ValidationError):
        ExactDyadic(1, -1)
    with pytest.raises(BudgetExceededError):
        ExactDyadic(1, MAX_DYADIC_EXPONENT + 1)
    with pytest.raises(ValidationError):
        dyadic_add_pow2(ExactDyadic(1), 0)


@seed(7)
@settings(max_examples=200)
@given(a=dyadics, b=dyadics)
def test_dyadic_arithmetic_matches_fractions(a, b):
    assert (a + b).to_fraction() == a.to_fraction() + b.to_fraction()
    assert (a - b).to_fraction() == a.to_fraction() - b.to_fraction()
    assert (a < b) == (a.to_fraction() < b.to_fraction())
    assert abs(a).to_fraction() == abs(a.to_fraction())


@seed(11)
@settings(max_examples=100)
@given(
    p=st.integers(1, (1 << 200) - 1),
    q=st.integers(1, 200),
    k=st.integers(-(10**6), 10**6),
)
def test_frac_times_matches_high_precision(p, q, k):
    with mpmath.workprec(2048):
        expected = mpmath.frac(mpmath.mpf(p) * k / mpmath.mpf(2) ** q)
        value = ExactDyadic(p, q).frac_times(k)
    assert value == pytest.approx(float(expected), abs=1e-15)


def test_frac_times_of_integer_is_zero():
    assert ExactDyadic(5).frac_times(123456789) == 0.0


@pytest.mark.parametrize(
    "value",
    ["3/8", "3/2^3", 0.375, " 3 / 8 "],
)
def test_parse_exact_beta(value):
    assert parse_beta("exact", value) == ExactDyadic(3, 3)


def test_parse_beta_rejects_non_dyadic_and_unknown_mode():
    with pytest.raises(ValidationError):
        parse_beta("exact", "1/3")
    with pytest.raises(ValidationError):
        parse_beta("exact", "one")
    with pytest.raises(ValidationError):
        parse_beta("decimal", "1")


def test_parse_float_beta():
    assert parse_beta("float", "golden") == FloatBeta(GOLDEN_MEAN)
    assert parse_beta("float", 0.25).value == 0.25


def test_beta_serialization_uses_hex():
    beta = dyadic_add_pow2(ExactDyadic(1), 120)
    data = beta.to_dict()
    assert data == {"mode": "exact", "p_hex": hex(beta.p), "q": 120}
    assert beta_from_dict(data) == beta
    assert beta_from_dict(FloatBeta(0.1).to_dict()) == FloatBeta(0.1)


def test_make_params_validates_and_reduces():
    params = make_params(t=0.5, theta=-0.25, lam=TWO_PI + 1.0)
    assert params.theta == pytest.approx(TWO_PI - 0.25)
    assert params.lam == pytest.approx(1.0)
    assert params.r == pytest.approx(math.sqrt(0.75))
    for bad in (-0.1, 1.5, float("nan")):
        with pytest.raises(ValidationError):
            make_params(t=bad)
    with pytest.raises(ValidationError):
        make_params(t=0.5, theta=float("inf"))


def test_replace_revalidates():
    params = make_params(t=0.5)
    assert params.replace(theta=-1.0).theta == pytest.approx(TWO_PI - 1.0)
    with pytest.raises(ValidationError):
        params.replace(t=2.0)


def test_digest_is_stable_and_sensitive():
    a = make_params(t=0.5, beta=ExactDyadic(3, 2))
    assert a.digest() == make_params(t=0.5, beta=ExactDyadic(6, 3)).digest()
    assert a.digest() != make_params(t=0.5, beta=ExactDyadic(1, 2)).digest()
    assert len(a.digest()) == 16


def test_reduce_angle_never_returns_two_pi():
    assert reduce_angle(-1e-20) == 0.0
    assert 0.0 <= reduce_angle(-7.0) < TWO_PI


def test_phase_theta_exact_at_large_sites():
    beta = ExactDyadic(3, 3)
    # 10**30 is divisible by 8
    k = 10**30 + 1
    expected = TWO_PI * Fraction(3, 8) + 0.5
    assert phase_theta(beta, 0.5, k) == pytest.approx(float(expected))
    ks = [0, 1, 2, 7, 8, k]
    values = phase_theta_array(beta, 0.5, ks)
    assert values[4] == pytest.approx(0.5)
    assert values[5] == pytest.approx(float(expected))

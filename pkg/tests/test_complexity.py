import math
from decimal import Decimal, localcontext

import pytest
from hypothesis import given, settings, strategies as st

from rnnlab import complexity as cx


def oracle_sound(coeffs, R, c_star):
    with localcontext() as ctx:
        ctx.prec = 50
        return float(sum(Decimal(c_star) * Decimal(i + 1) ** Decimal("1.75") * Decimal(R) ** i * abs(Decimal(c))
                         for i, c in enumerate(coeffs)))


def oracle_eps(coeffs, R, eps, c_star):
    with localcontext() as ctx:
        ctx.prec = 50
        lg = (1 / Decimal(eps)).ln()
        cr = Decimal(c_star) * Decimal(R)
        tot = 2 * abs(Decimal(coeffs[0]))
        for i, c in enumerate(coeffs[1:], start=1):
            tot += (cr ** i + ((lg / i).sqrt() * cr) ** i) * abs(Decimal(c))
        return float(tot)


def test_zero_function():
    assert cx.complexity_sound(cx.zero(), 3.0) == 0.0
    assert cx.complexity_eps(cx.zero(), 3.0, 0.1) == 0.0


@pytest.mark.parametrize("d", [1, 2, 3])
def test_monomial_is_order_R_to_d(d):
    phi = cx.monomial(d)
    ratios = [cx.complexity_sound(phi, R) / R ** d for R in (1.0, 2.0, 5.0, 10.0)]
    assert max(ratios) / min(ratios) < 1 + 1e-12
    assert ratios[0] == pytest.approx(cx.DEFAULT_C_STAR * (d + 1) ** 1.75)


def test_sin_matches_high_precision_sum():
    phi = cx.sin_series(11)
    assert cx.complexity_sound(phi, 1.0) == pytest.approx(oracle_sound(phi.coeffs, 1.0, 1e4), rel=1e-13)
    assert cx.complexity_eps(phi, 1.0, 0.01) == pytest.approx(oracle_eps(phi.coeffs, 1.0, 0.01, 1e4), rel=1e-13)


def test_expm1_truncated():
    eps = 1e-3
    phi = cx.parse_phi("exp", eps)
    assert phi.degree == math.ceil(math.log(1 / eps))
    v = cx.complexity_eps(phi, 1.0, eps)
    assert math.isfinite(v)
    assert v == pytest.approx(oracle_eps(phi.coeffs, 1.0, eps, 1e4), rel=1e-13)


def test_square_is_polylog_in_eps():
    phi = cx.monomial(2)
    a = cx.complexity_eps(phi, 1.0, 1e-2)
    b = cx.complexity_eps(phi, 1.0, 1e-6)
    assert 1.0 <= b / a <= (math.log(1e6) / math.log(1e2)) ** 2


def test_overflow_names_degree():
    with pytest.raises(OverflowError, match="degree"):
        cx.complexity_eps(cx.monomial(80), 10.0, 0.1)


def test_bad_arguments():
    with pytest.raises(ValueError):
        cx.complexity_sound(cx.monomial(1), -1.0)
    with pytest.raises(ValueError):
        cx.complexity_eps(cx.monomial(1), 1.0, 1.5)
    with pytest.raises(ValueError):
        cx.parse_phi("tanh")
    with pytest.raises(ValueError):
        cx.TaylorSeries((0.0, math.inf))


def test_parse_forms():
    assert cx.parse_phi("z^3").coeffs == (0.0, 0.0, 0.0, 1.0)
    assert cx.parse_phi("poly:0,1,2").coeffs == (0.0, 1.0, 2.0)
    assert cx.parse_phi("sin", degree=5).degree == 5
    assert cx.parse_phi("0").is_zero()


def test_truncation_stability_sin_exp():
    # K = 30 base: the tail (C* R)^K / K! is negligible once K ~ e C* R, so C* = 1 here
    for make in (cx.sin_series, cx.expm1_series):
        for R in (0.5, 1.0, 2.0):
            a = cx.complexity_eps(make(30), R, 0.01, c_star=1.0)
            b = cx.complexity_eps(make(35), R, 0.01, c_star=1.0)
            assert abs(b - a) / a < 1e-9
            a = cx.complexity_sound(make(30), R, 1.0)
            b = cx.complexity_sound(make(35), R, 1.0)
            assert abs(b - a) / a < 1e-9


coeff_lists = st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=8)


@given(coeff_lists, st.floats(0, 3), st.floats(1e-6, 3.7e-3))
@settings(max_examples=100, deadline=None)
def test_sound_below_eps_when_phi0_is_zero(c, R, eps):
    phi = cx.TaylorSeries((0.0,) + tuple(c[1:]))
    assert cx.complexity_sound(phi, R) <= cx.complexity_eps(phi, R, eps) * (1 + 1e-12) + 1e-300


@given(coeff_lists, st.floats(0, 3), st.floats(1, 10))
@settings(max_examples=100, deadline=None)
def test_homogeneous_and_monotone(c, R, t):
    phi = cx.TaylorSeries(tuple(c))
    base = cx.complexity_sound(phi, R)
    assert cx.complexity_sound(phi.scaled(t), R) == pytest.approx(t * base, rel=1e-12, abs=1e-300)
    assert cx.complexity_eps(phi.scaled(t), R, 0.01) == pytest.approx(
        t * cx.complexity_eps(phi, R, 0.01), rel=1e-12, abs=1e-300)
    assert cx.complexity_sound(phi, R + 0.5) >= base


def test_budget_fields():
    b = cx.budget(cx.monomial(2), 2.0, 0.01)
    assert b.c_sound <= b.c_eps and b.R == 2.0 and b.c_star == cx.DEFAULT_C_STAR

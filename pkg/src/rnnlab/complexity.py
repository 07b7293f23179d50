"""Taylor-coefficient complexity measures of smooth scalar functions.

For phi(z) = sum_i c_i z^i and a radius R,

    c_sound(phi, R) = C* sum_i (i + 1)^1.75 R^i |c_i|
    c_eps(phi, R)   = sum_i ((C* R)^i + (sqrt(log(1/eps) / i) C* R)^i) |c_i|

The i = 0 term of c_eps is read as its limit, 2 |c_0|.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_C_STAR = 1e4
_OVERFLOW = 1e300


@dataclass(frozen=True)
class TaylorSeries:
    """phi(z) = sum_{i <= K} coeffs[i] z^i."""

    coeffs: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        if not c:
            c = (0.0,)
        if not all(math.isfinite(v) for v in c):
            raise ValueError("Taylor coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.coeffs)

    def is_zero(self) -> bool:
        return not any(self.coeffs)

    def __call__(self, z):
        return np.polynomial.polynomial.polyval(z, self.array)

    def scaled(self, t: float) -> "TaylorSeries":
        return TaylorSeries(tuple(t * c for c in self.coeffs))

    def __add__(self, other: "TaylorSeries") -> "TaylorSeries":
        a, b = self.array, other.array
        n = max(a.size, b.size)
        return TaylorSeries(tuple(np.pad(a, (0, n - a.size)) + np.pad(b, (0, n - b.size))))


def truncation_degree(eps: float, const: float = 1.0) -> int:
    return max(1, math.ceil(const * math.log(1.0 / eps)))


def zero() -> TaylorSeries:
    return TaylorSeries((0.0,))


def monomial(d: int, coef: float = 1.0) -> TaylorSeries:
    return TaylorSeries((0.0,) * d + (coef,))


def sin_series(K: int) -> TaylorSeries:
    return TaylorSeries(tuple(
        0.0 if i % 2 == 0 else (-1) ** (i // 2) / math.factorial(i) for i in range(K + 1)))


def expm1_series(K: int) -> TaylorSeries:
    return TaylorSeries((0.0,) + tuple(1.0 / math.factorial(i) for i in range(1, K + 1)))


def parse_phi(spec: str, eps: float = 0.01, degree: int | None = None) -> TaylorSeries:
    """Build a series from a short text form.

    "0" | "z" | "z^3" | "poly:c0,c1,..." | "sin" | "exp" (e^z - 1).
    Transcendental functions are cut at truncation_degree(eps) unless
    `degree` is given.
    """
    s = spec.strip().lower().replace(" ", "")
    K = degree if degree is not None else truncation_degree(eps)
    if s in ("0", "zero"):
        return zero()
    if s == "z":
        return monomial(1)
    if s.startswith("z^") or s.startswith("z**"):
        return monomial(int(s.split("^")[-1].split("**")[-1]))
    if s.startswith("poly:"):
        return TaylorSeries(tuple(float(v) for v in s[5:].split(",") if v))
    if s == "sin":
        return sin_series(K)
    if s in ("exp", "expm1"):
        return expm1_series(K)
    raise ValueError(f"unknown function spec {spec!r}")


def _sum_terms(terms, what):
    total = 0.0
    for i, t in enumerate(terms):
        if not math.isfinite(t) or t > _OVERFLOW:
            raise OverflowError(f"{what}: term of degree {i} exceeds {_OVERFLOW:g}")
        total += t
    if total > _OVERFLOW:
        raise OverflowError(f"{what}: partial sums exceed {_OVERFLOW:g}")
    return total


def _power(base, i):
    try:
        return base ** i
    except OverflowError:
        return math.inf


def complexity_sound(phi: TaylorSeries, R: float, c_star: float = DEFAULT_C_STAR) -> float:
    if R < 0:
        raise ValueError("R must be nonnegative")
    terms = (c_star * (i + 1) ** 1.75 * _power(R, i) * abs(c) for i, c in enumerate(phi.coeffs))
    return _sum_terms(terms, "complexity_sound")


def complexity_eps(phi: TaylorSeries, R: float, eps: float, c_star: float = DEFAULT_C_STAR) -> float:
    if R < 0:
        raise ValueError("R must be nonnegative")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    lg = math.log(1.0 / eps)

    def term(i, c):
        if c == 0.0:
            return 0.0
        if i == 0:
            return 2.0 * abs(c)
        a = _power(c_star * R, i)
        b = _power(math.sqrt(lg / i) * c_star * R, i)
        return (a + b) * abs(c)

    return _sum_terms((term(i, c) for i, c in enumerate(phi.coeffs)), "complexity_eps")


@dataclass(frozen=True)
class ComplexityBudget:
    c_sound: float
    c_eps: float
    R: float
    eps: float
    c_star: float


def budget(phi: TaylorSeries, R: float, eps: float, c_star: float = DEFAULT_C_STAR) -> ComplexityBudget:
    return ComplexityBudget(complexity_sound(phi, R, c_star), complexity_eps(phi, R, eps, c_star),
                            R, eps, c_star)

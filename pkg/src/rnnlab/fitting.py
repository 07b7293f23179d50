"""Fitting functions H and the explicit weight shift W^⋇.

Indicator fit. For a ~ N(0, I), noise n ~ N(0, sigma^2) and an admissible
token x* with t = <w*, x*>, we want

    E[ 1[<a, x*> + n >= 0] H(a) ] = Phi(t)      for all |t| <= sqrt(3)/2,

with H(a) = sum_{i, q} alpha_{iq} He_i(<w*, a>) He_q(a_last). Integrating the
remaining Gaussian directions turns each basis moment into an explicit
polynomial in t, so the coefficients are found by quadrature plus a small
least-squares solve and checked against the Taylor target.

W^⋇. Row k is a sum over terms (i, j, r, s) of

    1[|<w_k, h0_{i-1}>| <= eps_c/sqrt(m)] * H_{ijrs}(a_k) / eps'_c
        * [e_s^T Back0_{i->j}]_k * h0_{i-1} / (m C_{ijs}),

where the 0 superscript refers to the null-sequence trace and
C_{ijs} = |e_s^T Back0_{i->j}|^2 |h0_{i-1}|^2 / m. Every row is a combination
of h0_1..h0_{L-2}, so W^⋇ is stored as a low-rank matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e as He
from scipy.special import erf
from scipy.stats import norm

from . import complexity as cx
from .concept import TargetFunction, targets_batch
from .inputs import CONTENT_RADIUS, LAST, actual_batch, sample_true_batch
from .numerics import LowRankMatrix, as_generator
from .report import LemmaReport
from .rnn import backward_rows, forward, jvp_outputs


class CalibrationError(RuntimeError):
    def __init__(self, msg, residuals):
        super().__init__(msg)
        self.residuals = residuals


class DegenerateNormalizer(RuntimeError):
    pass


def _cdf_derivative(k, x):
    """k-th derivative of the standard normal CDF."""
    if k == 0:
        return norm.cdf(x)
    c = np.zeros(k)
    c[-1] = 1.0
    return (-1) ** (k - 1) * He.hermeval(x, c) * norm.pdf(x)


def basis_for(phi: cx.TaylorSeries, eps_e: float):
    """(i, q) pairs used by the fit: q = 0 for odd i, q = 1 for even i >= 2."""
    K = max(phi.degree, cx.truncation_degree(eps_e)) if not phi.is_zero() else 0
    cols = [(0, 0)] if phi.coeffs[0] != 0 else []
    cols += [(i, 0 if i % 2 else 1) for i in range(1, K + 1)]
    return cols


def moment_matrix(cols, t, sigma, n_nodes=80):
    """E[1[...] He_i(z) He_q(b)] for every t (rows) and basis pair (columns).

    The Gaussian in b and the directions orthogonal to (w*, e_last) are
    integrated in closed form; z = <w*, a> by Gauss-Hermite quadrature.
    """
    t = np.atleast_1d(np.asarray(t, float))
    z, wz = He.hermegauss(n_nodes)
    wz = wz / math.sqrt(2 * math.pi)
    # residual variance of <a, x*> + n after fixing z and b (b enters as b/2)
    s2 = 0.75 - t ** 2 + sigma ** 2
    V = s2 + LAST ** 2
    M = np.zeros((t.size, len(cols)))
    for c, (i, q) in enumerate(cols):
        hz = He.hermeval(z, np.eye(i + 1)[i])
        arg = np.outer(t, z) / np.sqrt(V)[:, None]
        inner = (2 * np.sqrt(V))[:, None] ** (-q) * _cdf_derivative(q, arg)
        M[:, c] = inner @ (wz * hz)
    return M


def closed_form_alpha(phi: cx.TaylorSeries, sigma: float, cols):
    """Exact coefficients: the moment of (i, q) equals 2^-q (1+sigma^2)^(-(i+q)/2) Psi^(i+q)(0) t^i."""
    s = 1.0 + sigma ** 2
    out = np.zeros(len(cols))
    c = phi.array
    for k, (i, q) in enumerate(cols):
        if i < c.size and c[i] != 0.0:
            psi = float(_cdf_derivative(i + q, 0.0))
            out[k] = c[i] / (2.0 ** (-q) * s ** (-(i + q) / 2) * psi)
    return out


@dataclass
class FitFunction:
    cols: list
    alpha: np.ndarray
    sigma: float
    clamp: float
    target: cx.TaylorSeries
    residual: float = 0.0
    residuals: list = field(default_factory=list)

    def __call__(self, z, b):
        z = np.asarray(z, float)
        b = np.asarray(b, float)
        out = np.zeros(np.broadcast(z, b).shape)
        if not self.cols:
            return out
        imax = max(i for i, _ in self.cols)
        Hz = [He.hermeval(z, np.eye(imax + 1)[i]) for i in range(imax + 1)]
        Hb = (np.ones_like(b), b)
        for a, (i, q) in zip(self.alpha, self.cols):
            out = out + a * Hz[i] * Hb[q]
        return np.clip(out, -self.clamp, self.clamp)

    def on(self, a, wstar):
        """H evaluated at rows of a (n x d_x) for direction w*."""
        a = np.atleast_2d(a)
        return self(a @ wstar, a[:, -1])

    def expectation(self, t, sigma=None, n_nodes=80):
        """Quadrature value of E[1[<a,x*>+n>=0] H(a)] with noise std `sigma` (unclamped H)."""
        if not self.cols:
            return np.zeros(np.size(t))
        return moment_matrix(self.cols, t, self.sigma if sigma is None else sigma, n_nodes) @ self.alpha


def fit_indicator_function(phi: cx.TaylorSeries, sigma: float, eps_e: float, rng=None,
                           n_grid=41, n_nodes=80, c_star=cx.DEFAULT_C_STAR) -> FitFunction:
    """Calibrate H for the target phi at noise level sigma.

    rng is accepted for interface symmetry; the calibration is deterministic.
    Raises CalibrationError if the fitted expectation misses phi by more than
    eps_e / 2 anywhere on the t grid.
    """
    if sigma < 0.1:
        raise ValueError("sigma must be at least 0.1")
    if not 0 < eps_e < 1:
        raise ValueError("eps_e must lie in (0, 1)")
    clamp = cx.complexity_eps(phi, max(sigma, 1.0), eps_e, c_star) if not phi.is_zero() else 0.0
    cols = basis_for(phi, eps_e)
    if not cols:
        return FitFunction([], np.zeros(0), sigma, clamp, phi)
    t = np.linspace(-CONTENT_RADIUS, CONTENT_RADIUS, n_grid)
    M = moment_matrix(cols, t, sigma, n_nodes)
    target = phi(t)
    # scale columns to unit norm before solving; monomials in t are mildly ill-conditioned
    scale = np.linalg.norm(M, axis=0)
    scale[scale == 0] = 1.0
    alpha, *_ = np.linalg.lstsq(M / scale, target, rcond=None)
    alpha /= scale
    res = M @ alpha - target
    fit = FitFunction(cols, alpha, sigma, clamp, phi, float(np.abs(res).max()), res.tolist())
    if fit.residual > eps_e / 2:
        raise CalibrationError(f"calibration residual {fit.residual:.3g} exceeds eps_e/2 = {eps_e / 2:.3g}",
                               fit.residuals)
    return fit


def token_with_projection(wstar, t, rng=None):
    """An admissible token x* with <w*, x*> = t."""
    gen = as_generator(rng)
    d_x = wstar.size
    u = np.zeros(d_x)
    u[:-1] = gen.standard_normal(d_x - 1)
    u -= (u @ wstar) * wstar
    u /= np.linalg.norm(u)
    x = t * wstar + math.sqrt(max(0.75 - t * t, 0.0)) * u
    x[-1] = LAST
    return x


def mc_indicator_check(H: FitFunction, wstar, t_values, samples=10 ** 6, rng=0, noise_scale=1.0,
                       chunk=250_000):
    """Monte Carlo estimate (and standard error) of E[1[<a,x*>+n>=0] H(a)] per t."""
    gen = as_generator(rng)
    d_x = wstar.size
    est, se = [], []
    for t in t_values:
        x = token_with_projection(wstar, t, gen)
        s1 = s2 = 0.0
        done = 0
        while done < samples:
            n = min(chunk, samples - done)
            a = gen.standard_normal((n, d_x))
            noise = noise_scale * H.sigma * gen.standard_normal(n)
            v = (a @ x + noise >= 0) * H.on(a, wstar)
            s1 += v.sum()
            s2 += (v * v).sum()
            done += n
        mu = s1 / samples
        est.append(mu)
        se.append(math.sqrt(max(s2 / samples - mu * mu, 0.0) / samples))
    return np.array(est), np.array(se)


@dataclass
class WStarBundle:
    wstar: LowRankMatrix
    C: dict            # (i, j, s) -> normalizer
    eps_c: float
    eps_c_prime: dict  # i -> Gaussian probability of the indicator
    sigma: dict        # i -> noise level used for the fit
    selected: dict     # i -> number of selected neurons
    C_range: float
    fits: dict = field(default_factory=dict)

    def dense(self):
        return self.wstar.dense()

    def frobenius_norm(self):
        return self.wstar.frobenius_norm()

    def row_norm_max(self):
        return float(self.wstar.row_norms().max())


def measure_tau(params, null_trace, eps_x, probes=8, rng=0):
    """RMS size of h_{i-1} - h0_{i-1} orthogonal to h0_{i-1}, per i = 2..L-1."""
    L = null_trace.L
    Xs = sample_true_batch(rng, probes, L, params.d_x)
    X = actual_batch(Xs, eps_x)
    acc = np.zeros(L + 1)
    for n in range(probes):
        tr = forward(params, X[n])
        for i in range(2, L):
            h0 = null_trace.h[i - 1]
            dlt = tr.h[i - 1] - h0
            dlt -= (dlt @ h0) / (h0 @ h0) * h0
            acc[i] += dlt @ dlt
    return {i: math.sqrt(acc[i] / probes) for i in range(2, L)}


def default_eps_c(eps_e, eps_x, C_prime):
    return eps_e * eps_x / (4.0 * C_prime)


def build_w_star(params, F: TargetFunction, null_trace, eps_e, eps_x, rng=0, eps_c=None,
                 sigma=None, probes=8, c_star=cx.DEFAULT_C_STAR) -> WStarBundle:
    """Assemble W^⋇ from the null trace.

    eps_c defaults to eps_e eps_x / (4 C'), with C' the largest clamp among
    the fitted H. sigma, when not given, is max(0.1, sqrt(tau^2 + eps_c^2/6) / eps_x)
    with tau measured on `probes` random sequences; the eps_c^2/6 term is the
    variance of the uniform residual left by the indicator window.
    """
    m, L, d_x = params.m, null_trace.L, params.d_x
    terms = F.nonzero_terms()
    U = np.zeros((m, max(L - 2, 1)))
    V = np.zeros((m, max(L - 2, 1)))
    for i in range(2, L):
        V[:, i - 2] = null_trace.h[i - 1]
    bundle = WStarBundle(LowRankMatrix(U, V), {}, 0.0, {}, {}, {}, 0.0)
    if not terms:
        return bundle

    taus = measure_tau(params, null_trace, eps_x, probes, rng) if sigma is None else None
    if eps_c is None:
        # C' depends on sigma only through max(sigma, 1); a first pass at sigma = 1 fixes it
        cp = max(cx.complexity_eps(phi, 1.0, eps_e, c_star) for phi, _ in terms.values())
        if taus is not None:
            smax = max(1.0, max(taus[i] / eps_x for i in taus))
            cp = max(cx.complexity_eps(phi, smax, eps_e, c_star) for phi, _ in terms.values())
        eps_c = default_eps_c(eps_e, eps_x, cp)
    bundle.eps_c = eps_c
    for i in range(2, L):
        if sigma is None:
            s = math.sqrt(taus[i] ** 2 + eps_c ** 2 / 6.0) / eps_x
        else:
            s = sigma[i] if isinstance(sigma, dict) else float(sigma)
        bundle.sigma[i] = max(0.1, s)

    ahat = math.sqrt(m / 2.0) * params.A[:, :d_x]
    back = {}
    for (i, j, r, s) in terms:
        if (i, j) not in back:
            back[(i, j)] = backward_rows(null_trace, params, i, j)
    selected = {}
    for i in range(2, L):
        h0 = null_trace.h[i - 1]
        selected[i] = sel = np.flatnonzero(np.abs(params.W @ h0) <= eps_c / math.sqrt(m))
        bundle.selected[i] = int(sel.size)
        bundle.eps_c_prime[i] = float(erf(eps_c / (2.0 * np.linalg.norm(h0))))
    for (i, j), BK in back.items():
        h0n2 = float(null_trace.h[i - 1] @ null_trace.h[i - 1])
        for s in range(1, F.d + 1):
            C = float(BK[s - 1] @ BK[s - 1]) * h0n2 / m
            if C < 1e-3 / F.d:
                raise DegenerateNormalizer(f"C[{i},{j},{s}] = {C:.3g} below 1e-3/d")
            bundle.C[(i, j, s)] = C

    crange = 0.0
    for (i, j, r, s), (phi, w) in sorted(terms.items()):
        key = (phi.coeffs, round(bundle.sigma[i], 12))
        if key not in bundle.fits:
            bundle.fits[key] = fit_indicator_function(phi, bundle.sigma[i], eps_e, c_star=c_star)
        H = bundle.fits[key]
        ecp = bundle.eps_c_prime[i]
        crange = max(crange, H.clamp / ecp)
        sel = selected[i]
        if sel.size == 0:
            continue
        vals = H.on(ahat[sel], w) / ecp
        U[sel, i - 2] += vals * back[(i, j)][s - 1, sel] / (m * bundle.C[(i, j, s)])
    bundle.C_range = crange
    return bundle


def verify_existence(params, wsb: WStarBundle, F: TargetFunction, xstar, eps_target, eps_x,
                     shift=None) -> LemmaReport:
    """max over (j, s) of |f_{j,s}(W^⋇) - F*_{j,s}(x*)| for one or more true sequences.

    With `shift` the trace (and hence the first-order map) is taken at W + shift.
    """
    Xs = np.asarray(xstar)
    if Xs.ndim == 2:
        Xs = Xs[None]
    X = actual_batch(Xs, eps_x)
    T = targets_batch(F, Xs)
    errs = []
    for n in range(Xs.shape[0]):
        tr = forward(params, X[n], shift=shift)
        f = jvp_outputs(tr, params, wsb.wstar, shift=shift)
        errs.append(float(np.abs(f[3:] - T[n, 3:]).max()) if F.L >= 3 else 0.0)
    err = max(errs)
    return LemmaReport(
        lemma_id="existence", statistic={"max_error": err, "per_sample": errs,
                                         "selected": wsb.selected, "eps_c": wsb.eps_c},
        envelope=f"max_js |f_js(W*) - F*_js| <= {eps_target}", passed=err <= eps_target,
        trials=len(errs), config={"m": params.m, "L": F.L, "d": F.d, "eps_x": eps_x})

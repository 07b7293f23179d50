"""Empirical Rademacher complexity and train/test gaps.

For a class F and samples x_1..x_N,

    R(X; F) = E_sigma sup_{f in F} (1/N) sum_q sigma_q f(x_q).

Both classes handled here are linear over a Euclidean ball, so the sup is
exact: radius * |sum_q sigma_q g_q| / N, with g_q the representer of sample q.
Only the expectation over sigma is Monte Carlo.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .inputs import actual_batch
from .losses import get_loss
from .numerics import as_generator
from .rnn import backward_rows, forward, forward_batch


@dataclass
class RadEstimate:
    N: int
    draws: int
    method: str
    value: float
    se: float
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"N": self.N, "draws": self.draws, "method": self.method, "value": self.value,
                "se": self.se, **self.extra}


def _signs(gen, draws, N):
    return gen.integers(0, 2, size=(draws, N)) * 2.0 - 1.0


def _gram_estimate(K, radius, draws, gen, method, extra=None):
    """radius/N * E sqrt(sigma^T K sigma) by Monte Carlo over sigma."""
    N = K.shape[0]
    S = _signs(gen, draws, N)
    q = np.einsum("dn,nk,dk->d", S, K, S)
    vals = radius * np.sqrt(np.maximum(q, 0.0)) / N
    se = float(vals.std(ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0
    return RadEstimate(N, draws, method, float(vals.mean()), se, extra or {})


def rademacher_linear(X, B, draws=2000, rng=0) -> RadEstimate:
    """Class {x -> <w, x> : |w| <= B} on unit-norm rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    norms = np.linalg.norm(X, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-9):
        raise ValueError("samples must have unit norm")
    return _gram_estimate(X @ X.T, float(B), draws, as_generator(rng), "exact-linear")


def brute_force_linear_sup(X, sigma, B, points=10_000, rng=0) -> float:
    """max over random points of the radius-B sphere of (1/N) sum sigma_q <w, x_q>.

    Always <= the exact value B |sum sigma_q x_q| / N.
    """
    gen = as_generator(rng)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    v = np.asarray(sigma, float) @ X
    # sample around the maximizer so the search gets close to it
    Wp = gen.standard_normal((points, X.shape[1]))
    nv = np.linalg.norm(v)
    if nv > 0:
        t = gen.uniform(0, 4, size=(points, 1))
        Wp = Wp + t * math.sqrt(X.shape[1]) * v / nv
    Wp *= B / np.linalg.norm(Wp, axis=1, keepdims=True)
    return float(np.max(Wp @ v) / X.shape[0])


def linearized_representers(params, trace, j, s):
    """Row stacks (A_q, H_q) with G_q = sum_i a_i h_i^T.

    a_i = M_{i->j}^T e_s and h_i the hidden state, i = 1..j-1, so that
    e_s^T (first-order change of y_j under W') = <G_q, W'>.
    """
    u = np.zeros((params.d, 1))
    u[s, 0] = 1.0
    rows = [backward_rows(trace, params, i + 1, j, u)[0] * trace.D[i + 1] for i in range(1, j)]
    return np.array(rows), trace.h[1:j].copy()


def linearized_gram(params, traces, j, s):
    """K_{qq'} = <G_q, G_q'> and |G_q|_F for all samples."""
    parts = [linearized_representers(params, tr, j, s) for tr in traces]
    k = j - 1
    A = np.concatenate([p[0] for p in parts])
    H = np.concatenate([p[1] for p in parts])
    full = (A @ A.T) * (H @ H.T)
    N = len(traces)
    K = full.reshape(N, k, N, k).sum(axis=(1, 3))
    return K, np.sqrt(np.maximum(np.diag(K), 0.0))


def rademacher_rnn_linearized(params, traces, Delta, draws=2000, rng=0, j=None, s=0) -> RadEstimate:
    """Class {x -> e_s^T f_j(W') : |W'|_F <= Delta / sqrt(m)} with f_j the first-order map."""
    j = traces[0].L if j is None else j
    if not 2 <= j <= traces[0].L:
        raise ValueError(f"token index {j} must be in [2, L]")
    K, gn = linearized_gram(params, traces, j, s)
    radius = Delta / math.sqrt(params.m)
    return _gram_estimate(K, radius, draws, as_generator(rng), "exact-linearized",
                          {"j": j, "s": s, "Delta": Delta, "G_fro_max": float(gn.max()),
                           "G_fro_mean": float(gn.mean()), "m": params.m})


def per_sample_loss(params, Wfull, X, Y, lam, loss, chunk=256):
    G = get_loss(loss)
    out = []
    for a in range(0, X.shape[0], chunk):
        Yh = forward_batch(params, X[a:a + chunk], W=Wfull)
        out.append(np.sum(G.value(lam * Yh[:, 3:], Y[a:a + chunk, 3:]), axis=-1))
    return np.concatenate(out)


def measure_generalization(params, W_shift, train, test, loss, lam, eps_x, b=None, Delta=None,
                           draws=500, rng=0, delta=0.05, rad_samples=256):
    """Empirical and held-out risk of W + W_shift with a Rademacher-based prediction.

    train and test are (Xstar, Y) pairs. Losses are reported raw and truncated
    at b (default: largest training loss). The predicted gap is
        2 sqrt(2) lam sum_{j>=3, s} R_{j,s} + 3 b sqrt(log(2/delta) / (2N))
    with R_{j,s} the linearized estimate at Delta = sqrt(m) |W_shift|_F.
    """
    Wfull = params.W + W_shift
    Xtr = actual_batch(train[0], eps_x)
    Xte = actual_batch(test[0], eps_x)
    ltr = per_sample_loss(params, Wfull, Xtr, train[1], lam, loss)
    lte = per_sample_loss(params, Wfull, Xte, test[1], lam, loss)
    del Wfull
    if b is None:
        b = float(np.max(np.abs(ltr)))
    clip = lambda v: np.clip(v, -b, b)  # noqa: E731
    N = Xtr.shape[0]
    if Delta is None:
        Delta = math.sqrt(params.m) * float(np.linalg.norm(W_shift))
    idx = np.arange(min(N, rad_samples))
    traces = [forward(params, Xtr[q]) for q in idx]
    L = params.L
    rad = 0.0
    for j in range(3, L + 1):
        for s in range(params.d):
            rad += rademacher_rnn_linearized(params, traces, Delta, draws, rng, j, s).value
    # the estimate at rad_samples points scales as 1/sqrt(N) to the full set
    rad *= math.sqrt(len(idx) / N)
    predicted = 2 * math.sqrt(2) * lam * rad + 3 * b * math.sqrt(math.log(2 / delta) / (2 * N))
    emp, held = float(ltr.mean()), float(lte.mean())
    emp_t, held_t = float(clip(ltr).mean()), float(clip(lte).mean())
    return {"empirical_risk": emp, "heldout_risk": held, "gap": held - emp,
            "empirical_risk_truncated": emp_t, "heldout_risk_truncated": held_t,
            "gap_truncated": held_t - emp_t, "b": b, "Delta": Delta, "rademacher_sum": rad,
            "predicted_gap": predicted, "N": N, "N_test": Xte.shape[0]}

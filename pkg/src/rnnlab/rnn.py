"""Elman RNN with ReLU: initialization, traces, backward operators, gradients.

    g_l = W h_{l-1} + A x_l,   h_l = relu(g_l),   h_0 = 0,   y_l = B h_l

Token-indexed arrays have L + 1 rows with row 0 holding h_0 = 0 (and zero
placeholders for g_0, D_0, y_0). The backward operator

    Back_{i->j} = B D_j W D_{j-1} W ... D_{i+1} W,     Back_{j->j} = B,

is the Jacobian of y_j with respect to h_i.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .inputs import ActualSequence
from .losses import get_loss
from .numerics import as_generator, gaussian_matrix, load_matrix, matrix_apply, save_matrix


@dataclass(frozen=True)
class Dims:
    m: int
    d_x: int
    d: int
    L: int

    def __post_init__(self):
        if self.m < 2 or self.d < 1 or self.d_x < 1 or self.L < 1:
            raise ValueError(f"invalid dims {self}")


def rho(m: int, L: int, d: int) -> float:
    return 100.0 * L * d * math.log(m)


@dataclass
class NetworkParams:
    W: np.ndarray  # m x m
    A: np.ndarray  # m x (d_x + 1)
    B: np.ndarray  # d x m
    L: int

    def __post_init__(self):
        m = self.W.shape[0]
        if self.W.shape != (m, m) or self.A.shape[0] != m or self.B.shape[1] != m:
            raise ValueError("inconsistent weight shapes")

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def d_x(self):
        return self.A.shape[1] - 1

    @property
    def d(self):
        return self.B.shape[0]

    @property
    def dims(self):
        return Dims(self.m, self.d_x, self.d, self.L)

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for name in ("W", "A", "B"):
            save_matrix(os.path.join(directory, f"{name}.rnnw"), getattr(self, name))
        with open(os.path.join(directory, "dims.json"), "w") as f:
            json.dump(vars(self.dims), f)

    @classmethod
    def load(cls, directory) -> "NetworkParams":
        with open(os.path.join(directory, "dims.json")) as f:
            L = json.load(f)["L"]
        W, A, B = (load_matrix(os.path.join(directory, f"{n}.rnnw")) for n in ("W", "A", "B"))
        return cls(W, A, B, L)


def init_random(dims: Dims, rng) -> NetworkParams:
    """W, A ~ N(0, 2/m) and B ~ N(0, 1/d), drawn in that order."""
    gen = as_generator(rng)
    m = dims.m
    W = gaussian_matrix(gen, m, m, 2.0 / m)
    A = gaussian_matrix(gen, m, dims.d_x + 1, 2.0 / m)
    B = gaussian_matrix(gen, dims.d, m, 1.0 / dims.d)
    return NetworkParams(W, A, B, dims.L)


@dataclass(frozen=True)
class ForwardTrace:
    g: np.ndarray  # (L + 1, m)
    h: np.ndarray  # (L + 1, m)
    D: np.ndarray  # (L + 1, m) bool
    y: np.ndarray  # (L + 1, d)

    @property
    def L(self):
        return self.g.shape[0] - 1

    def check(self) -> bool:
        return (np.array_equal(self.h[1:], np.where(self.D[1:], self.g[1:], 0.0))
                and np.array_equal(self.D[1:], self.g[1:] >= 0)
                and not self.h[0].any())

    def records(self, full: bool = False):
        """Per-token summary rows for JSON-lines dumps."""
        out = []
        for l in range(1, self.L + 1):
            rec = {"token": l, "h_norm": float(np.linalg.norm(self.h[l])),
                   "g_inf": float(np.abs(self.g[l]).max()), "active": int(self.D[l].sum()),
                   "y_norm": float(np.linalg.norm(self.y[l]))}
            if full:
                rec.update(g=self.g[l].tolist(), h=self.h[l].tolist(), y=self.y[l].tolist())
            out.append(rec)
        return out


def dump_trace(path, trace: ForwardTrace, full: bool = False) -> None:
    """JSON-lines, one record per token."""
    with open(path, "w") as f:
        for rec in trace.records(full):
            f.write(json.dumps(rec) + "\n")


def _tokens(x):
    return x.x if isinstance(x, ActualSequence) else np.asarray(x, dtype=float)


def _matvec_plus(W, shift, v):
    out = W @ v
    if shift is not None:
        out = out + matrix_apply(shift, v)
    return out


def forward(params: NetworkParams, x, shift=None, W=None) -> ForwardTrace:
    """Trace of one sequence under weights W (default params.W) plus `shift`."""
    X = _tokens(x)
    L = X.shape[0] - 1
    if X.shape[1] != params.A.shape[1]:
        raise ValueError(f"token dimension {X.shape[1]} does not match A ({params.A.shape[1]})")
    W = params.W if W is None else W
    m = params.m
    g = np.zeros((L + 1, m))
    h = np.zeros((L + 1, m))
    AX = X[1:] @ params.A.T
    g[1] = AX[0]  # h_0 = 0
    np.maximum(g[1], 0.0, out=h[1])
    for l in range(2, L + 1):
        g[l] = _matvec_plus(W, shift, h[l - 1]) + AX[l - 1]
        np.maximum(g[l], 0.0, out=h[l])
    D = g >= 0
    D[0] = False
    return ForwardTrace(g, h, D, h @ params.B.T)


def forward_batch(params: NetworkParams, X, shift=None, W=None, keep_hidden: bool = False):
    """Outputs (N, L + 1, d) for a batch of actual sequences (N, L + 1, d_x + 1).

    With keep_hidden the hidden states (L + 1, N, m) are returned as well.
    """
    X = np.asarray(X, dtype=float)
    N, Lp1, _ = X.shape
    W = params.W if W is None else W
    H = np.zeros((Lp1, N, params.m))
    for l in range(1, Lp1):
        G = X[:, l] @ params.A.T
        if l > 1:
            G += H[l - 1] @ W.T
        if l > 1 and shift is not None:
            G += matrix_apply(shift, H[l - 1].T).T
        np.maximum(G, 0.0, out=H[l])
    Y = np.einsum("lnm,dm->nld", H, params.B)
    return (Y, H) if keep_hidden else Y


def backward_rows(trace: ForwardTrace, params: NetworkParams, i: int, j: int, U=None, W=None):
    """U^T Back_{i->j}; U is d x k (default: identity, giving the dense d x m operator)."""
    if not 0 <= i <= j <= trace.L:
        raise ValueError(f"need 0 <= i <= j <= L, got i={i}, j={j}")
    W = params.W if W is None else W
    V = params.B.copy() if U is None else np.asarray(U).T @ params.B
    for l in range(j, i, -1):
        V = (V * trace.D[l]) @ W
    return V


def back_operator(trace: ForwardTrace, params: NetworkParams, i: int, j: int, W=None):
    """M_{i->j}, mapping a weight-shift injection W' h_i to the first-order change of y_j.

    M_{i->j} = Back_{i+1->j} D_{i+1} for i < j and M_{j->j} = B.
    """
    if not 1 <= i <= j <= trace.L:
        raise ValueError(f"need 1 <= i <= j <= L, got i={i}, j={j}")
    if i == j:
        return params.B.copy()
    return backward_rows(trace, params, i + 1, j, W=W) * trace.D[i + 1]


@dataclass(frozen=True)
class Perturbation:
    Wp: object
    spectral_bound: float | None = None

    def __post_init__(self):
        if self.spectral_bound is not None:
            Wp = self.Wp
            s = Wp.spectral_norm() if hasattr(Wp, "spectral_norm") else np.linalg.norm(Wp, 2)
            if s > self.spectral_bound * (1 + 1e-9):
                raise ValueError(f"spectral norm {s:.4g} exceeds declared bound {self.spectral_bound:.4g}")


def _unwrap(Wp):
    return Wp.Wp if isinstance(Wp, Perturbation) else Wp


def jvp_outputs(trace: ForwardTrace, params: NetworkParams, Wp, W=None, shift=None) -> np.ndarray:
    """First-order change of all outputs y_1..y_L under W -> W + Wp, shape (L + 1, d).

    The linearization point is W (default params.W) plus an optional `shift`,
    which must match the weights `trace` was computed with.
    """
    Wp = _unwrap(Wp)
    W = params.W if W is None else W
    L, m = trace.L, params.m
    dh = np.zeros(m)
    dy = np.zeros((L + 1, params.d))
    for l in range(2, L + 1):
        dg = _matvec_plus(W, shift, dh) + matrix_apply(Wp, trace.h[l - 1])
        dh = dg * trace.D[l]
        dy[l] = params.B @ dh
    return dy


def first_order_map(trace: ForwardTrace, params: NetworkParams, Wp, j: int) -> np.ndarray:
    """f_j(W') = sum_{i<j} M_{i->j} W' h_i, exactly linear in W'."""
    if not 1 <= j <= trace.L:
        raise ValueError(f"token index {j} out of range")
    return jvp_outputs(trace, params, Wp)[j]


def objective(params, Wt, x, ystar, lam, loss, first_token: int = 3) -> float:
    G = get_loss(loss)
    tr = forward(params, x, shift=Wt)
    L = tr.L
    return float(np.sum(G.value(lam * tr.y[first_token:L + 1], np.asarray(ystar)[first_token:L + 1])))


def gradient_factors(params, Wt, x, ystar, lam, loss, first_token: int = 3):
    """Objective value and factors (dG, Hprev) with gradient = dG^T Hprev.

    dG[l - 1] is dObj/dg_l and Hprev[l - 1] is h_{l-1}, for l = 1..L; the
    row for l = 1 multiplies h_0 = 0.
    """
    G = get_loss(loss)
    Wfull = params.W if Wt is None else params.W + (Wt.dense() if hasattr(Wt, "dense") else Wt)
    tr = forward(params, x, W=Wfull)
    L = tr.L
    ys = np.asarray(ystar)
    v = lam * tr.y[first_token:L + 1]
    val = float(np.sum(G.value(v, ys[first_token:L + 1])))
    if not np.isfinite(val):
        raise FloatingPointError("non-finite loss")
    gy = np.zeros((L + 1, params.d))
    gy[first_token:L + 1] = lam * G.grad(v, ys[first_token:L + 1])
    dG = np.zeros((L + 1, params.m))
    dh = np.zeros(params.m)
    for l in range(L, 1, -1):
        dh = dh + params.B.T @ gy[l]
        dG[l] = dh * tr.D[l]
        if l > 2:  # dG[1] only ever multiplies h_0 = 0
            dh = Wfull.T @ dG[l]
    return val, dG[1:], tr.h[:-1]


def gradient(params, Wt, x, ystar, lam, loss, first_token: int = 3) -> np.ndarray:
    """d Obj / d W' at W' = Wt, using relu'(0) = 1 (m x m)."""
    _, dG, Hp = gradient_factors(params, Wt, x, ystar, lam, loss, first_token)
    return dG.T @ Hp

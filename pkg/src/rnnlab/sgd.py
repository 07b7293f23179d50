"""Plain single-sample SGD on the shift W' with lambda-scaled outputs.

    Obj(x*, y*; W') = sum_{j=3}^{L} G(lambda * B h_j(W + W'), y*_j)
    W'_t = W'_{t-1} - eta * grad Obj(sampled example; W'_{t-1}),   W'_0 = 0
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg.blas import dgemm

from .inputs import actual_batch
from .losses import get_loss
from .numerics import as_generator
from .rnn import NetworkParams, forward_batch, gradient_factors, rho as rho_of


class HyperParamWarning(UserWarning):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, snapshot):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class HyperParams:
    eps: float
    eps_x: float
    lam: float
    eta: float
    T: int
    m: int
    L: int
    d: int
    d_x: int
    p: int
    rho: float
    varrho: float
    Delta_cap: float
    overridden: tuple = ()

    def to_dict(self):
        return asdict(self)


def derive_hyperparams(cc, dims, eps, eps_x=None, overrides=None, c_eta=1.0, c_T=1.0,
                       T_cap=200_000, delta_power=11) -> HyperParams:
    """Theory-driven defaults: lambda = eps/(10 L rho), eta = c_eta/(eps rho^2 m),
    T = min(c_T p^2 C^2 / eps^2, T_cap). Any field can be overridden by name.
    """
    m, L, d, d_x = dims.m, dims.L, dims.d, dims.d_x
    C, p = cc.C, cc.p
    r = rho_of(m, L, d)
    if eps_x is None:
        eps_x = 1.0 / (10 * L)
    varrho = 100.0 * L * d * p * cc.C_sound_log * math.log(m) / eps
    bound = 1.0 / (L * d * p * max(cc.C_sound, 1e-300))
    if eps >= bound:
        warnings.warn(f"eps={eps} is outside the admissible range (< {bound:.3g}) "
                      "for these dimensions; proceeding", HyperParamWarning, stacklevel=2)
    T = c_T * p * p * C * C / (eps * eps)
    hp = HyperParams(
        eps=eps, eps_x=eps_x, lam=eps / (10 * L * r), eta=c_eta / (eps * r * r * m),
        T=int(min(max(T, 1), T_cap)), m=m, L=L, d=d, d_x=d_x, p=p, rho=r, varrho=varrho,
        Delta_cap=C * C * p * p * r ** delta_power / (eps * eps))
    overrides = dict(overrides or {})
    for k, v in overrides.items():
        if not hasattr(hp, k):
            raise ValueError(f"unknown hyperparameter {k!r}")
        setattr(hp, k, type(getattr(hp, k))(v))
    hp.overridden = tuple(sorted(overrides))
    return hp


def empirical_risk(params, Wfull, X, Y, lam, loss, chunk=256) -> float:
    """Mean over samples of sum_{j>=3} G(lam * y_j, y*_j) at weights Wfull."""
    G = get_loss(loss)
    tot = 0.0
    for a in range(0, X.shape[0], chunk):
        out = forward_batch(params, X[a:a + chunk], W=Wfull)
        tot += float(np.sum(G.value(lam * out[:, 3:], Y[a:a + chunk, 3:])))
    return tot / X.shape[0]


@dataclass
class TrainResult:
    W_shift: np.ndarray
    history: list
    steps: int
    best_risk: float
    best_step: int
    avg_risk: float
    trajectory_hash: str
    best_W_shift: np.ndarray | None = None
    step_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cap_exceeded: bool = False

    def summary(self):
        last = self.history[-1] if self.history else {}
        return {"steps": self.steps, "best_risk": self.best_risk, "best_step": self.best_step,
                "avg_risk": self.avg_risk, "final": last, "trajectory_hash": self.trajectory_hash,
                "max_step_norm": float(self.step_norms.max()) if self.step_norms.size else 0.0,
                "cap_exceeded": self.cap_exceeded}


def _apply_update(Wcur, dG, Hp, eta):
    # Wcur (C order) is the Fortran-ordered transpose: Wcur^T -= eta * Hp^T dG in place
    if eta == 0.0:
        return
    dgemm(alpha=-eta, a=Hp.T, b=dG, beta=1.0, c=Wcur.T, overwrite_c=True)


def train(params: NetworkParams, Xstar, Y, hp: HyperParams, loss="centered-l2", rng=0,
          callbacks=(), eval_every=500, test=None, keep_best=True, stop_below=None,
          eval_samples=None) -> TrainResult:
    """Run the SGD loop on the data set (Xstar, Y).

    Risk rows (step, empirical_risk, population_risk_estimate, frobenius_norm)
    are recorded every `eval_every` steps and at the end; `test` is an
    optional held-out pair (Xstar_test, Y_test). Training stops early when a
    callback returns True or the empirical risk drops below `stop_below`.
    """
    if Xstar.shape[0] == 0:
        raise ValueError("empty data set")
    gen = as_generator(rng)
    Gl = get_loss(loss)
    X = actual_batch(Xstar, hp.eps_x)
    Xt = actual_batch(test[0], hp.eps_x) if test is not None else None
    N = X.shape[0]
    if eval_samples is not None and eval_samples < N:
        ev_idx = gen.permutation(N)[:eval_samples]
    else:
        ev_idx = slice(None)
    Wcur = np.array(params.W, order="C", copy=True)
    cap = hp.Delta_cap / math.sqrt(hp.m)
    history, risks = [], []
    best = (math.inf, 0, None)
    step_norms = np.zeros(hp.T)
    cap_exceeded = False

    def evaluate(t):
        nonlocal best, cap_exceeded
        emp = empirical_risk(params, Wcur, X[ev_idx], Y[ev_idx], hp.lam, Gl)
        pop = empirical_risk(params, Wcur, Xt, test[1], hp.lam, Gl) if Xt is not None else float("nan")
        fro = float(np.linalg.norm(Wcur - params.W))
        if fro > cap:
            cap_exceeded = True
        row = {"step": t, "empirical_risk": emp, "population_risk_estimate": pop, "frobenius_norm": fro}
        history.append(row)
        risks.append(emp)
        if emp < best[0]:
            best = (emp, t, (Wcur - params.W) if keep_best else None)
        return row

    evaluate(0)
    t = 0
    stop = False
    for t in range(1, hp.T + 1):
        n = int(gen.integers(N))
        try:
            _, dG, Hp = _factors_at(params, Wcur, X[n], Y[n], hp.lam, Gl)
        except FloatingPointError as e:
            raise TrainingDiverged(f"{e} at step {t}",
                                   {"step": t, "sample": n, "W_shift": Wcur - params.W}) from e
        if not (np.all(np.isfinite(dG)) and np.all(np.isfinite(Hp))):
            raise TrainingDiverged(f"non-finite gradient at step {t}",
                                   {"step": t, "sample": n, "W_shift": Wcur - params.W})
        step_norms[t - 1] = math.sqrt(max(float(np.sum((dG @ dG.T) * (Hp @ Hp.T))), 0.0))
        _apply_update(Wcur, dG, Hp, hp.eta)
        if t % eval_every == 0 or t == hp.T:
            row = evaluate(t)
            if stop_below is not None and row["empirical_risk"] <= stop_below:
                stop = True
        for cb in callbacks:
            if cb(t, Wcur, history):
                stop = True
        if stop:
            break
    if history[-1]["step"] != t:
        evaluate(t)
    W_shift = Wcur - params.W
    h = hashlib.sha256(np.ascontiguousarray(W_shift).tobytes()).hexdigest()
    return TrainResult(W_shift=W_shift, history=history, steps=t, best_risk=best[0], best_step=best[1],
                       avg_risk=float(np.mean(risks)), trajectory_hash=h, best_W_shift=best[2],
                       step_norms=step_norms[:t], cap_exceeded=cap_exceeded)


def _factors_at(params, Wfull, x, y, lam, G):
    """gradient_factors evaluated at full weights Wfull (avoids forming W + W')."""
    shim = NetworkParams(Wfull, params.A, params.B, params.L)
    return gradient_factors(shim, None, x, y, lam, G)

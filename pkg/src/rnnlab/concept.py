"""Target functions F*_{j,s}(x*) = sum_{i<j} sum_r Phi_{i,j,r,s}(<w*_{i,j,r,s}, x*_i>)."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from . import complexity as cx
from .inputs import sample_true_batch
from .losses import get_loss
from .numerics import as_generator


@dataclass
class TargetFunction:
    L: int
    d_x: int
    d: int
    p: int
    # (i, j, r, s) -> (TaylorSeries, unit w* with last coordinate 0); 1-based r, s
    terms: dict = field(default_factory=dict)

    def add(self, i, j, r, s, phi, wstar):
        if not (2 <= i < j <= self.L and 1 <= r <= self.p and 1 <= s <= self.d):
            raise ValueError(f"term index {(i, j, r, s)} out of range")
        if phi.coeffs[0] != 0.0:
            raise ValueError("concept series must vanish at 0")
        w = np.asarray(wstar, dtype=float)
        if w.shape != (self.d_x,):
            raise ValueError(f"w* must have length {self.d_x}")
        if abs(np.linalg.norm(w) - 1) > 1e-9 or w[-1] != 0.0:
            raise ValueError("w* must be a unit vector with last coordinate 0")
        self.terms[(i, j, r, s)] = (phi, w)

    def nonzero_terms(self):
        return {k: v for k, v in self.terms.items() if not v[0].is_zero()}

    def __add__(self, other: "TargetFunction") -> "TargetFunction":
        if (self.L, self.d_x, self.d) != (other.L, other.d_x, other.d):
            raise ValueError("shape mismatch")
        out = TargetFunction(self.L, self.d_x, self.d, self.p + other.p)
        out.terms.update(self.terms)
        for (i, j, r, s), v in other.terms.items():
            out.terms[(i, j, self.p + r, s)] = v
        return out


def eval_target(F: TargetFunction, xstar, j: int, s: int) -> float:
    """F*_{j,s} at a single true sequence ((L + 1, d_x) array, rows 2..L-1)."""
    if not (3 <= j <= F.L and 1 <= s <= F.d):
        raise ValueError(f"(j, s) = {(j, s)} out of range")
    X = np.asarray(getattr(xstar, "tokens", xstar))
    total = 0.0
    for (i, jj, r, ss), (phi, w) in F.terms.items():
        if jj == j and ss == s:
            total += float(phi(w @ X[i]))
    return total


def targets_batch(F: TargetFunction, Xstar) -> np.ndarray:
    """All targets for a (N, L + 1, d_x) batch; returns (N, L + 1, d), rows 3..L filled."""
    Xstar = np.asarray(Xstar)
    Y = np.zeros((Xstar.shape[0], F.L + 1, F.d))
    for (i, j, r, s), (phi, w) in F.terms.items():
        Y[:, j, s - 1] += phi(Xstar[:, i] @ w)
    return Y


def random_unit_wstar(gen, d_x):
    w = np.zeros(d_x)
    w[:-1] = gen.standard_normal(d_x - 1)
    return w / np.linalg.norm(w)


def random_concept(L, d_x, d, p, phi, rng) -> TargetFunction:
    """Every (i, j, r, s) carries the same Phi with an independent random direction."""
    gen = as_generator(rng)
    F = TargetFunction(L, d_x, d, p)
    for j in range(3, L + 1):
        for i in range(2, j):
            for r in range(1, p + 1):
                for s in range(1, d + 1):
                    F.add(i, j, r, s, phi, random_unit_wstar(gen, d_x))
    return F


def from_two_layer(L, A_list, W_list, phi) -> TargetFunction:
    """F*_j(x*) = sum_{i=2}^{j-1} A*_{j-i} phi(W*_{j-i} x*_i).

    A_list[k - 1] is the d x p matrix A*_k, W_list[k - 1] the p x d_x matrix
    W*_k with unit rows (last coordinate 0). The scalar A*_k[s, r] is
    absorbed into the series.
    """
    d, p = np.asarray(A_list[0]).shape
    d_x = np.asarray(W_list[0]).shape[1]
    F = TargetFunction(L, d_x, d, p)
    for j in range(3, L + 1):
        for i in range(2, j):
            Ak, Wk = np.asarray(A_list[j - i - 1]), np.asarray(W_list[j - i - 1])
            for r in range(p):
                for s in range(d):
                    F.add(i, j, r + 1, s + 1, phi.scaled(Ak[s, r]), Wk[r])
    return F


@dataclass(frozen=True)
class ConceptComplexity:
    C: float        # max c_eps(Phi, sqrt(L))
    C_sound: float  # max c_sound(Phi, sqrt(L))
    p: int
    C_sound_log: float = 0.0  # max c_sound(Phi, sqrt(L log(1/eps))), enters varrho

    def __iter__(self):
        return iter((self.C, self.C_sound, self.p))


def concept_complexity(F: TargetFunction, L: int, eps: float, c_star: float = cx.DEFAULT_C_STAR):
    R = math.sqrt(L)
    R_log = math.sqrt(L * math.log(1.0 / eps))
    series = [phi for phi, _ in F.terms.values()]
    C = max((cx.complexity_eps(f, R, eps, c_star) for f in series), default=0.0)
    Cs = max((cx.complexity_sound(f, R, c_star) for f in series), default=0.0)
    Cl = max((cx.complexity_sound(f, R_log, c_star) for f in series), default=0.0)
    return ConceptComplexity(C, Cs, F.p, Cl)


def sample_dataset(F: TargetFunction, N: int, rng, noise_std: float = 0.0, loss="centered-l2",
                   support=None):
    """N sequences with labels y*_j = F*_j(x*) + noise (tokens 3..L).

    Returns (Xstar, Y, opt_estimate); opt_estimate is the empirical loss of
    F* itself, sum over j of G(F*_j, y*_j) averaged over the samples. For
    cross-entropy the label is the argmax of the noisy target.
    """
    gen = as_generator(rng)
    Xstar = sample_true_batch(gen, N, F.L, F.d_x, support)
    T = targets_batch(F, Xstar)
    Y = T.copy()
    if noise_std > 0:
        Y[:, 3:] += noise_std * gen.standard_normal(Y[:, 3:].shape)
    G = get_loss(loss)
    if G.label_kind == "index":
        Y = np.argmax(Y, axis=-1)
    opt = float(np.mean(np.sum(G.value(T[:, 3:], Y[:, 3:]), axis=1))) if F.L >= 3 else 0.0
    return Xstar, Y, opt


def save_concept(path, F: TargetFunction) -> None:
    cp = configparser.ConfigParser()
    cp["concept"] = {"L": str(F.L), "d_x": str(F.d_x), "d": str(F.d), "p": str(F.p)}
    for (i, j, r, s), (phi, w) in sorted(F.terms.items()):
        cp[f"term {i} {j} {r} {s}"] = {
            "coeffs": ", ".join(repr(c) for c in phi.coeffs),
            "wstar": ", ".join(repr(float(v)) for v in w),
        }
    with open(path, "w") as f:
        cp.write(f)


def load_concept(path) -> TargetFunction:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    c = cp["concept"]
    F = TargetFunction(c.getint("L"), c.getint("d_x"), c.getint("d"), c.getint("p"))
    for sec in cp.sections():
        if not sec.startswith("term"):
            continue
        i, j, r, s = (int(v) for v in sec.split()[1:])
        coeffs = [float(v) for v in cp[sec]["coeffs"].split(",")]
        w = np.array([float(v) for v in cp[sec]["wstar"].split(",")])
        F.add(i, j, r, s, cx.TaylorSeries(tuple(coeffs)), w)
    return F

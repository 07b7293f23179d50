"""True token sequences, the normalized RNN input, and the null sequence.

Arrays are 1-based along the token axis: a sequence of length L is stored
with L + 1 rows and row 0 unused (zero). True tokens live in rows 2..L-1.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import as_generator

LAST = 0.5                      # last coordinate of every true token
CONTENT_RADIUS = np.sqrt(0.75)  # norm left for the other coordinates


class InputRangeWarning(UserWarning):
    pass


def reference_token(d_x: int) -> np.ndarray:
    """The empty-content token (0, .., 0, sqrt(3)/2, 1/2)."""
    if d_x < 2:
        raise ValueError("d_x must be at least 2")
    x = np.zeros(d_x)
    x[-2] = CONTENT_RADIUS
    x[-1] = LAST
    return x


@dataclass(frozen=True)
class TrueSequence:
    tokens: np.ndarray  # (L + 1, d_x), rows 2..L-1 used

    @property
    def L(self):
        return self.tokens.shape[0] - 1

    @property
    def d_x(self):
        return self.tokens.shape[1]

    def token(self, i):
        if not 2 <= i <= self.L - 1:
            raise IndexError(f"true tokens are indexed 2..{self.L - 1}")
        return self.tokens[i]


@dataclass(frozen=True)
class ActualSequence:
    x: np.ndarray  # (L + 1, d_x + 1), rows 1..L used
    eps_x: float

    @property
    def L(self):
        return self.x.shape[0] - 1


def normalize_true(raw, L: int | None = None) -> TrueSequence:
    """Complete raw content vectors to admissible tokens.

    Each raw vector has d_x - 2 entries and norm at most sqrt(3)/2; it is
    padded with sqrt(3/4 - |raw|^2) in the second-last coordinate and 1/2
    in the last one. `raw` holds tokens 2..L-1 in order.
    """
    R = np.atleast_2d(np.asarray(raw, dtype=float))
    n, c = R.shape
    if L is None:
        L = n + 2
    if n != L - 2:
        raise ValueError(f"expected {L - 2} raw tokens, got {n}")
    norms2 = np.einsum("ij,ij->i", R, R)
    if np.any(norms2 > 0.75 * (1 + 1e-12)):
        k = int(np.argmax(norms2))
        raise ValueError(f"raw token {k + 2} has norm {np.sqrt(norms2[k]):.6g} > sqrt(3)/2")
    tokens = np.zeros((L + 1, c + 2))
    tokens[2:L, :c] = R
    gap = 0.75 - norms2
    gap[gap < 1e-12] = 0.0  # rounding in |raw|^2 would otherwise leave a ~1e-8 pad
    tokens[2:L, c] = np.sqrt(gap)
    tokens[2:L, c + 1] = LAST
    return TrueSequence(tokens)


def sample_tokens(rng, n: int, d_x: int) -> np.ndarray:
    """n tokens uniform on {x : |x| = 1, x[-1] = 1/2}."""
    gen = as_generator(rng)
    z = gen.standard_normal((n, d_x - 1))
    z *= CONTENT_RADIUS / np.linalg.norm(z, axis=1, keepdims=True)
    return np.hstack([z, np.full((n, 1), LAST)])


def sample_true_batch(rng, N: int, L: int, d_x: int, support=None) -> np.ndarray:
    """(N, L + 1, d_x) batch of true sequences.

    With `support` (a k x d_x array of admissible tokens) each token is
    drawn uniformly from those rows instead of the sphere slice.
    """
    gen = as_generator(rng)
    X = np.zeros((N, L + 1, d_x))
    if L < 3:
        return X
    if support is None:
        X[:, 2:L] = sample_tokens(gen, N * (L - 2), d_x).reshape(N, L - 2, d_x)
    else:
        support = np.asarray(support, dtype=float)
        idx = gen.integers(0, support.shape[0], size=(N, L - 2))
        X[:, 2:L] = support[idx]
    return X


def check_eps_x(eps_x: float, L: int, strict: bool = False) -> None:
    if not 0 < eps_x < 1:
        raise ValueError(f"eps_x must lie in (0, 1), got {eps_x}")
    if eps_x > 1.0 / (10 * L) * (1 + 1e-12):
        msg = f"eps_x={eps_x} exceeds 1/(10L)={1 / (10 * L):.4g}"
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, InputRangeWarning, stacklevel=3)


def actual_batch(Xstar: np.ndarray, eps_x: float) -> np.ndarray:
    """Normalized inputs for a (N, L + 1, d_x) batch; returns (N, L + 1, d_x + 1)."""
    N, Lp1, d_x = Xstar.shape
    L = Lp1 - 1
    X = np.zeros((N, Lp1, d_x + 1))
    X[:, 1, d_x] = 1.0
    X[:, 2:L, :d_x] = eps_x * Xstar[:, 2:L]
    X[:, L, :d_x] = eps_x * reference_token(d_x)
    return X


def to_actual(xs: TrueSequence, eps_x: float, strict: bool = False) -> ActualSequence:
    check_eps_x(eps_x, xs.L, strict)
    return ActualSequence(actual_batch(xs.tokens[None], eps_x)[0], eps_x)


def null_sequence(L: int, d_x: int, eps_x: float, strict: bool = False) -> ActualSequence:
    """Token 1 is the seed token; tokens 2..L all carry the reference token."""
    check_eps_x(eps_x, L, strict)
    x = np.zeros((L + 1, d_x + 1))
    x[1, d_x] = 1.0
    x[2:, :d_x] = eps_x * reference_token(d_x)
    return ActualSequence(x, eps_x)


def save_dataset(path, Xstar, Y, meta: dict) -> None:
    """JSON-lines, one sample per line; labels for tokens 3..L."""
    L = Xstar.shape[1] - 1
    with open(path, "w") as f:
        for n in range(Xstar.shape[0]):
            rec = {"xstar": Xstar[n, 2:L].tolist(), "ystar": np.asarray(Y[n])[3:].tolist(), "meta": meta}
            f.write(json.dumps(rec) + "\n")


def load_dataset(path):
    xs, ys, meta = [], [], {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            xs.append(rec["xstar"])
            ys.append(rec["ystar"])
            meta = rec.get("meta", meta)
    T = np.asarray(xs, dtype=float)
    N, n, d_x = T.shape
    L = n + 2
    Xstar = np.zeros((N, L + 1, d_x))
    Xstar[:, 2:L] = T
    Yr = np.asarray(ys)
    Y = np.zeros((N, L + 1) + Yr.shape[2:], dtype=Yr.dtype)
    Y[:, 3:] = Yr
    return Xstar, Y, meta

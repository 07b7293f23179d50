"""Seeded randomness, Gram-Schmidt, norms and the matrix snapshot format."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SNAPSHOT_MAGIC = b"RNNW"
SNAPSHOT_VERSION = 1
# magic, version, rows, cols, reserved (zero)
_HEADER = struct.Struct("<4sIQQI")
assert _HEADER.size == 28


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (seed, stream_id).

    Distinct stream ids under one seed give statistically independent
    generators (numpy SeedSequence spawn keys), so parallel trials can each
    take their own stream and still be rerun bit for bit.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, k: int) -> "RngStream":
        """Derived stream; stable function of (seed, stream_id, k)."""
        return RngStream(self.seed, (self.stream_id << 16) + 1 + k)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")


def gaussian_matrix(gen: np.random.Generator, rows: int, cols: int, var: float) -> np.ndarray:
    """rows x cols matrix with i.i.d. N(0, var) entries, filled in place."""
    out = np.empty((rows, cols))
    gen.standard_normal(out=out)
    out *= np.sqrt(var)
    return out


def _check_finite(M, name="matrix"):
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")


def gram_schmidt(vectors, rel_tol: float = 1e-12) -> np.ndarray:
    """Orthonormalize v_1..v_n (given as a list or as columns of an m x n array).

    When the residual of v_i is below rel_tol * |v_i| the column is filled
    with the first standard basis vector that survives orthogonalization
    against the previous columns, so the output is always orthonormal.
    """
    if isinstance(vectors, np.ndarray) and vectors.ndim == 2:
        V = np.asarray(vectors, dtype=float)
    else:
        vs = [np.asarray(v, dtype=float) for v in vectors]
        if not vs:
            raise ValueError("need at least one vector")
        if any(v.ndim != 1 or v.shape != vs[0].shape for v in vs):
            raise ValueError("vectors must be 1-d and of equal length")
        V = np.stack(vs, axis=1)
    m, n = V.shape
    if n > m:
        raise ValueError(f"cannot orthonormalize {n} vectors in dimension {m}")
    _check_finite(V, "vectors")
    U = np.zeros((m, n))
    for i in range(n):
        v = V[:, i]
        r = v.copy()
        # two passes keep orthogonality at the 1e-15 level
        for _ in range(2):
            r -= U[:, :i] @ (U[:, :i].T @ r)
        nv = np.linalg.norm(v)
        nr = np.linalg.norm(r)
        if nv == 0.0 or nr < rel_tol * nv:
            r = _fallback_direction(U[:, :i])
            nr = np.linalg.norm(r)
        U[:, i] = r / nr
    return U


def _fallback_direction(U):
    m, i = U.shape
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        for _ in range(2):
            e -= U @ (U.T @ e)
        if np.linalg.norm(e) > 1e-6:
            return e
    raise ValueError("no orthogonal direction left")  # unreachable when i < m


def spectral_norm(M, tol: float = 1e-8, rng=0, max_iter: int = 20000) -> float:
    """Largest singular value by power iteration on M^T M.

    Stops once the Rayleigh quotient moves by less than tol * 1e-2 relative;
    the extra factor keeps the returned value within tol of the truth for
    matrices with small spectral gaps.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        raise ValueError("empty matrix")
    _check_finite(M)
    if M.ndim == 1:
        return float(np.linalg.norm(M))
    gen = as_generator(rng)
    v = gen.standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = nw  # Rayleigh quotient of the normalized iterate, approx sigma^2
        if abs(new - est) <= 1e-2 * tol * new:
            est = new
            break
        est = new
    return float(np.linalg.norm(M @ v))


def row_norm_p_q(M, p=2, q=np.inf) -> float:
    """l_q norm (over rows) of the row-wise l_p norms."""
    valid = (2, np.inf)
    if p not in valid or q not in valid:
        raise ValueError("p and q must be 2 or inf")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rows = np.linalg.norm(M, ord=p, axis=1)
    return float(np.linalg.norm(rows, ord=q))


def save_matrix(path, M) -> None:
    M = np.ascontiguousarray(M, dtype="<f8")
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ValueError("snapshot needs a nonempty 2-d matrix")
    _check_finite(M)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, M.shape[0], M.shape[1], 0))
        f.write(M.tobytes(order="C"))


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("truncated snapshot header")
        magic, version, rows, cols, _ = _HEADER.unpack(head)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(float)


def fit_loglog_slope(x, y, level: float = 0.95):
    """Least-squares slope of log y against log x with a t-based interval."""
    from scipy import stats

    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    if lx.size < 3:
        raise ValueError("a slope claim needs at least 3 grid points")
    res = stats.linregress(lx, ly)
    tq = stats.t.ppf(0.5 + level / 2, lx.size - 2)
    return float(res.slope), (float(res.slope - tq * res.stderr), float(res.slope + tq * res.stderr))


class LowRankMatrix:
    """The matrix U @ V.T kept in factored form (U: m x r, V: n x r)."""

    def __init__(self, U, V):
        U = np.asarray(U, dtype=float)
        V = np.asarray(V, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if V.ndim == 1:
            V = V[:, None]
        if U.shape[1] != V.shape[1]:
            raise ValueError("factor ranks differ")
        self.U, self.V = U, V

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def rank(self):
        return self.U.shape[1]

    def __matmul__(self, x):
        return self.U @ (self.V.T @ x)

    def rmatmul(self, y):
        """y^T M for a vector or the rows of a matrix y."""
        return (y @ self.U) @ self.V.T

    @property
    def T(self):
        return LowRankMatrix(self.V, self.U)

    def __mul__(self, t):
        return LowRankMatrix(self.U * t, self.V)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __add__(self, other):
        if isinstance(other, LowRankMatrix):
            return LowRankMatrix(np.hstack([self.U, other.U]), np.hstack([self.V, other.V]))
        return self.dense() + other

    def dense(self):
        return self.U @ self.V.T

    def frobenius_norm(self):
        G = (self.U.T @ self.U) * (self.V.T @ self.V)
        return float(np.sqrt(max(G.sum(), 0.0)))

    def row_norms(self):
        VtV = self.V.T @ self.V
        return np.sqrt(np.maximum(np.einsum("ir,rs,is->i", self.U, VtV, self.U), 0.0))

    def spectral_norm(self):
        _, Ru = np.linalg.qr(self.U)
        _, Rv = np.linalg.qr(self.V)
        return float(np.linalg.norm(Ru @ Rv.T, 2))


def matrix_apply(M, x):
    """M @ x for a dense or factored matrix (None means the zero matrix)."""
    if M is None:
        return np.zeros_like(x)
    return M @ x

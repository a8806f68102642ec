"""Dense-matrix substrate shared by every other module.

Matrices are 2-D C-order numpy arrays. Correctness checks and oracles run
in float64; training runs in float32. Randomness flows through
:class:`RngState`, which derives an independent child stream per text label,
so adding a layer to a model never perturbs the draws of existing layers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, SvdConvergenceError

_KEY_MASK = (1 << 128) - 1


@dataclass(frozen=True)
class RngState:
    """A seed plus the generator identity.

    Equal states produce identical draw sequences on every platform (Philox
    is counter-based and numpy pins its stream). ``stream(label)`` derives a
    child state by hashing ``"{seed}:{label}"`` with SHA-256 and using the
    low 128 bits as the child key, so each label owns an independent stream
    regardless of the order streams are created in.
    """

    seed: int
    algorithm: str = "philox"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "philox":
            raise ParameterError(f"unknown rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.Philox(key=self.seed & _KEY_MASK))

    def stream(self, label: str) -> "RngState":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return RngState(int.from_bytes(digest[:16], "little"), self.algorithm)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``w = u @ diag(s) @ v.T``.

    ``u`` is m x p, ``s`` is length p non-increasing and non-negative,
    ``v`` is n x p (already transposed back), with p = min(m, n). The sign
    convention makes the first nonzero entry of each ``u`` column
    non-negative; the paired ``v`` column is flipped with it.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def p(self) -> int:
        return self.s.size

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def svd(w: np.ndarray) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Backed by LAPACK via numpy, which is bit-stable for identical input on
    a given build; LAPACK's internal iteration cap is the convergence
    bound, and hitting it raises :class:`SvdConvergenceError` naming the
    shape. Orthonormality and reconstruction are validated by the test
    suite rather than on every call.
    """
    w = np.asarray(w)
    if w.ndim != 2 or w.size == 0:
        raise ParameterError(f"svd expects a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ParameterError("svd input contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(
            f"SVD did not converge within the iteration cap for a "
            f"{w.shape[0]}x{w.shape[1]} matrix"
        ) from exc
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(vt.T)
    for j in range(s.size):
        nz = np.flatnonzero(u[:, j])
        if nz.size and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return SvdResult(u=u, s=s, v=v)


def init_matrix(
    m: int,
    n: int,
    scheme: str,
    rng: RngState,
    std: float | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Draw an m x n weight for a map of fan-in n (rows are output units).

    Schemes: ``kaiming`` is N(0, 2/n), ``xavier`` is N(0, 2/(m+n)),
    ``gaussian`` is N(0, std^2) with ``std`` required. Draws happen in
    float64 and are cast afterwards, so float32 and float64 builds share
    the same underlying values.
    """
    if m < 1 or n < 1:
        raise ParameterError(f"matrix dims must be positive, got {m}x{n}")
    if scheme == "kaiming":
        scale = np.sqrt(2.0 / n)
    elif scheme == "xavier":
        scale = np.sqrt(2.0 / (m + n))
    elif scheme == "gaussian":
        if std is None or std < 0:
            raise ParameterError("gaussian init needs a std >= 0")
        scale = float(std)
    else:
        raise ParameterError(f"unknown init scheme {scheme!r}")
    draw = rng.generator().standard_normal((m, n), dtype=np.float64)
    return np.ascontiguousarray((draw * scale).astype(dtype))


def sigmoid(z):
    """Numerically stable logistic function, elementwise."""
    arr = np.asarray(z)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ez = np.exp(arr[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out[0] if scalar else out


def silu(z):
    """z * sigmoid(z); silu(0) = 0, silu(1) ~ 0.731059."""
    return z * sigmoid(z)


def silu_grad(z):
    """Closed-form derivative s(z) * (1 + z * (1 - s(z)))."""
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def frobenius(w: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(w)))


def gather_cols(x: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Select columns; adjoint of :func:`scatter_cols` for unique indices."""
    return x[:, indices]


def scatter_cols(values: np.ndarray, indices: np.ndarray, n: int) -> np.ndarray:
    """Place columns of ``values`` into a zero matrix of width ``n``."""
    out = np.zeros((values.shape[0], n), dtype=values.dtype)
    out[:, indices] = values
    return out

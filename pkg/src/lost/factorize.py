"""Turning a freshly drawn dense weight into low-rank factors plus a
channel-sparse block.

The pipeline: draw W (m x n, fan-in n), take its SVD, keep the top-r
triplets as factors A (output side, m x r) and B (input side, n x r), rank
the input channels of a complement matrix built from the triplets the
factors did not keep, and gather the top-k columns of the *original* W as
the sparse block. The complement only ranks channels; values always come
from W itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .linalg import RngState, SvdResult, init_matrix, svd
from .lost_layer import LostLinear

COMP_SOURCES = ("rem", "top", "bot", "rand", "ini")
CRITERIA = ("l2", "l1", "random")
LOWRANK_INIT_FAMILIES = ("svd", "kaiming", "xavier", "cola")

DEFAULT_R_COMP = 256


@dataclass(frozen=True)
class LowRankFactors:
    """a is m x r (output side), b is n x r (input side); the low-rank map
    is x -> act(x @ b) @ a.T."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[1]:
            raise ParameterError(
                f"factor shapes disagree: a {self.a.shape}, b {self.b.shape}"
            )

    @property
    def r(self) -> int:
        return self.a.shape[1]


@dataclass(frozen=True)
class CompSource:
    """Which singular triplets form the complement used for channel ranking.

    rem: triplets from r_comp down (discard the strongest r_comp);
    top: the strongest r_comp; bot: the weakest r_comp; rand: r_comp
    distinct triplets drawn uniformly; ini: the original matrix, no SVD.
    For a configured layer r_comp must stay below min(m, n); the op itself
    also accepts r_comp == p so completeness identities can be checked.
    """

    source: str
    r_comp: int = DEFAULT_R_COMP

    def __post_init__(self):
        if self.source not in COMP_SOURCES:
            raise ParameterError(
                f"unknown complement source {self.source!r}, expected one of {COMP_SOURCES}"
            )


@dataclass(frozen=True)
class ChannelSelection:
    """Sorted unique input-channel indices chosen for the sparse block."""

    indices: np.ndarray
    strategy: tuple[str, str] = ("rem", "l2")

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1 or idx.size == 0:
            raise ParameterError("channel selection must be a non-empty 1-D index list")
        if np.any(np.diff(idx) <= 0) or idx[0] < 0:
            raise ParameterError("channel indices must be strictly increasing and non-negative")

    @property
    def k(self) -> int:
        return int(self.indices.size)


def channel_count(rho: float, n: int) -> int:
    """k = ceil(rho * n), clamped to [1, n].

    The product is rounded to 9 decimals before the ceiling so binary
    representation noise (0.01 * 100 = 1.0000000000000002) cannot inflate k.
    """
    if not 0.0 < rho <= 1.0:
        raise ParameterError(f"rho must be in (0, 1], got {rho}")
    if n < 1:
        raise ParameterError(f"channel count needs n >= 1, got {n}")
    k = math.ceil(round(rho * n, 9))
    return max(1, min(k, n))


def truncate_svd(decomp: SvdResult, r: int) -> LowRankFactors:
    """Top-r factors a = u_r sqrt(s_r), b = v_r sqrt(s_r).

    a @ b.T is the rank-r Frobenius-optimal approximation of the original
    matrix; at r = p it reconstructs it to rounding error.
    """
    if not 1 <= r <= decomp.p:
        raise ParameterError(f"rank {r} outside [1, {decomp.p}]")
    root = np.sqrt(decomp.s[:r])
    return LowRankFactors(a=decomp.u[:, :r] * root, b=decomp.v[:, :r] * root)


def build_complement(
    decomp: SvdResult,
    comp: CompSource,
    rng: RngState | None = None,
    original: np.ndarray | None = None,
) -> np.ndarray:
    """Rebuild the matrix slice the channel ranking should look at.

    ``original`` is required for source "ini" (that source bypasses the
    SVD entirely). r_comp up to p inclusive is accepted here: "rem" at
    r_comp = p is the zero matrix and "top" at r_comp = p is the full
    reconstruction, which the decomposition-completeness checks rely on.
    """
    if comp.source == "ini":
        if original is None:
            raise ParameterError('complement source "ini" needs the original matrix')
        return np.array(original, copy=True)
    p = decomp.p
    if not 1 <= comp.r_comp <= p:
        raise ParameterError(f"r_comp {comp.r_comp} outside [1, {p}] for source {comp.source!r}")
    if comp.source == "rem":
        take = np.arange(comp.r_comp, p)
    elif comp.source == "top":
        take = np.arange(0, comp.r_comp)
    elif comp.source == "bot":
        take = np.arange(p - comp.r_comp, p)
    elif comp.source == "rand":
        if rng is None:
            raise ParameterError('complement source "rand" needs an rng')
        take = rng.generator().permutation(p)[: comp.r_comp]
    else:  # unreachable; CompSource validates
        raise ParameterError(f"unknown complement source {comp.source!r}")
    if take.size == 0:
        return np.zeros((decomp.u.shape[0], decomp.v.shape[0]), dtype=decomp.u.dtype)
    return (decomp.u[:, take] * decomp.s[take]) @ decomp.v[:, take].T


def channel_importance(
    w_comp: np.ndarray, criterion: str, rng: RngState | None = None
) -> np.ndarray:
    """Per-input-channel scores: column norms, or seeded uniforms for
    "random" (which ignores the matrix values)."""
    w_comp = np.asarray(w_comp)
    if w_comp.ndim != 2:
        raise ParameterError(f"importance expects a matrix, got shape {w_comp.shape}")
    if criterion == "l2":
        return np.linalg.norm(w_comp, axis=0)
    if criterion == "l1":
        return np.abs(w_comp).sum(axis=0)
    if criterion == "random":
        if rng is None:
            raise ParameterError('criterion "random" needs an rng')
        return rng.generator().random(w_comp.shape[1])
    raise ParameterError(f"unknown criterion {criterion!r}, expected one of {CRITERIA}")


def select_channels(
    scores: np.ndarray, k: int, strategy: tuple[str, str] = ("rem", "l2")
) -> ChannelSelection:
    """Indices of the k largest scores, ties broken toward the lower index,
    returned sorted ascending."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ParameterError("scores must be 1-D")
    if not np.all(np.isfinite(scores)):
        raise ParameterError("scores contain non-finite entries")
    if not 1 <= k <= scores.size:
        raise ParameterError(f"k {k} outside [1, {scores.size}]")
    order = np.argsort(-scores, kind="stable")
    return ChannelSelection(indices=np.sort(order[:k]), strategy=strategy)


def build_sparse(w: np.ndarray, selection: ChannelSelection) -> np.ndarray:
    """Gather the selected columns of the original weight (values are never
    taken from the complement)."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ParameterError("build_sparse expects a matrix")
    if selection.indices[-1] >= w.shape[1]:
        raise ParameterError(
            f"channel index {int(selection.indices[-1])} out of range for n={w.shape[1]}"
        )
    return np.ascontiguousarray(w[:, selection.indices])


def alt_lowrank_init(
    m: int, n: int, r: int, family: str, rng: RngState, dtype=np.float64
) -> LowRankFactors:
    """Alternative factor initializers.

    svd: truncate the SVD of a fresh Kaiming draw. kaiming: input-side
    factor from a fan-in-n Kaiming draw, output side all zero (the layer
    output starts at zero). xavier: both factors Xavier for their own
    shapes. cola: both factors Gaussian with Var = sqrt(2/n)/sqrt(r), so
    Var[(a @ b.T)_ij] = 2/n matches the Kaiming fan-in variance.
    """
    if not 1 <= r <= min(m, n):
        raise ParameterError(f"rank {r} outside [1, {min(m, n)}]")
    if family == "svd":
        w = init_matrix(m, n, "kaiming", rng.stream("dense_init"))
        factors = truncate_svd(svd(w), r)
        a, b = factors.a, factors.b
    elif family == "kaiming":
        b = init_matrix(r, n, "kaiming", rng.stream("factor_b")).T
        a = np.zeros((m, r))
    elif family == "xavier":
        a = init_matrix(m, r, "xavier", rng.stream("factor_a"))
        b = init_matrix(n, r, "xavier", rng.stream("factor_b"))
    elif family == "cola":
        std = (np.sqrt(2.0 / n) / np.sqrt(r)) ** 0.5
        a = init_matrix(m, r, "gaussian", rng.stream("factor_a"), std=std)
        b = init_matrix(n, r, "gaussian", rng.stream("factor_b"), std=std)
    else:
        raise ParameterError(
            f"unknown factor init family {family!r}, expected one of {LOWRANK_INIT_FAMILIES}"
        )
    return LowRankFactors(
        a=np.ascontiguousarray(a.astype(dtype)), b=np.ascontiguousarray(b.astype(dtype))
    )


def lost_init(
    m: int,
    n: int,
    r: int,
    rho: float,
    gamma: float,
    comp_source: str = "rem",
    criterion: str = "l2",
    lowrank_init: str = "svd",
    rng: RngState = RngState(0),
    *,
    r_comp: int | None = None,
    activation: str = "silu",
    combine: str = "output_avg",
    dtype=np.float32,
) -> LostLinear:
    """Build one mixed layer for an n -> m map from a single Kaiming draw.

    All randomness comes from labeled child streams of ``rng``, so two
    inits that differ only in the factor family share the same dense draw
    and the same channel selection. r_comp defaults to 256 clipped to
    min(m, n) - 1.
    """
    p = min(m, n)
    if not 1 <= r <= p:
        raise ParameterError(f"rank {r} outside [1, {p}]")
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"gamma must be in [0, 1], got {gamma}")
    if r_comp is None:
        r_comp = min(DEFAULT_R_COMP, p - 1) if p > 1 else 1
    if comp_source != "ini" and not 1 <= r_comp < max(p, 2):
        raise ParameterError(f"r_comp {r_comp} outside [1, {p - 1}] for a configured layer")

    w = init_matrix(m, n, "kaiming", rng.stream("dense_init"))
    decomp = svd(w)
    if lowrank_init == "svd":
        factors = truncate_svd(decomp, r)
    else:
        factors = alt_lowrank_init(m, n, r, lowrank_init, rng.stream("factors"))
    w_comp = build_complement(
        decomp, CompSource(comp_source, r_comp), rng.stream("comp"), original=w
    )
    scores = channel_importance(w_comp, criterion, rng.stream("criterion"))
    selection = select_channels(scores, channel_count(rho, n), strategy=(comp_source, criterion))
    w_s = build_sparse(w, selection)
    return LostLinear(
        a=np.ascontiguousarray(factors.a.astype(dtype)),
        b=np.ascontiguousarray(factors.b.astype(dtype)),
        w_s=np.ascontiguousarray(w_s.astype(dtype)),
        indices=selection,
        gamma=float(gamma),
        activation=activation,
        combine=combine,
    )

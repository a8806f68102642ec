"""The mixed linear layer: gamma-weighted sum of an activated low-rank
pair and a channel-sparse block.

For an n -> m map with input x (batch x n):

    low  = act(x @ b) @ a.T          a: m x r, b: n x r
    sp   = x[:, idx] @ w_s.T         w_s: m x k, idx sorted unique
    y    = gamma * low + (1 - gamma) * sp

``output_avg`` combines the two outputs as written. ``weight_avg``
multiplies x by the merged dense weight gamma * a @ b.T +
(1 - gamma) * expand(w_s) instead, which is only the same function when the
activation is the identity, so that pairing is enforced at construction.
gamma is a fixed hyperparameter, never trained.

Backward (dy is batch x m, g = dy @ a, g' = g * act'(x @ b)):

    da   = gamma * dy.T @ act(x @ b)
    db   = gamma * x.T @ g'
    dw_s = (1 - gamma) * dy.T @ x[:, idx]
    dx   = gamma * g' @ b.T + (1 - gamma) * scatter_idx(dy @ w_s)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ParameterError, StateError
from .linalg import scatter_cols, silu, silu_grad

if TYPE_CHECKING:
    from .factorize import ChannelSelection

ACTIVATIONS = ("silu", "identity")
COMBINE_MODES = ("output_avg", "weight_avg")


@dataclass
class LostLinear:
    """Parameters of one mixed layer. Arrays are mutated only by the
    optimizer phase; forward/backward never write to them."""

    a: np.ndarray
    b: np.ndarray
    w_s: np.ndarray
    indices: "ChannelSelection"
    gamma: float
    activation: str = "silu"
    combine: str = "output_avg"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.combine not in COMBINE_MODES:
            raise ParameterError(f"unknown combine mode {self.combine!r}")
        if self.combine == "weight_avg" and self.activation != "identity":
            raise ParameterError("weight_avg combine requires the identity activation")
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError(f"gamma must be in [0, 1], got {self.gamma}")
        m, r = self.a.shape
        n, rb = self.b.shape
        if rb != r:
            raise ParameterError(f"factor ranks disagree: a has {r}, b has {rb}")
        if self.w_s.shape != (m, self.indices.k):
            raise ParameterError(
                f"sparse block shape {self.w_s.shape} != ({m}, {self.indices.k})"
            )
        if int(self.indices.indices[-1]) >= n:
            raise ParameterError("channel index out of range for the input width")

    @property
    def in_dim(self) -> int:
        return self.b.shape[0]

    @property
    def out_dim(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def k(self) -> int:
        return self.indices.k


@dataclass
class ForwardCache:
    """Single-use intermediates from one training-mode forward."""

    x: np.ndarray
    h: np.ndarray
    act: np.ndarray
    x_sel: np.ndarray


@dataclass
class LayerGrads:
    da: np.ndarray
    db: np.ndarray
    dw_s: np.ndarray


def _activate(layer: LostLinear, h: np.ndarray) -> np.ndarray:
    return silu(h) if layer.activation == "silu" else h


def forward(
    layer: LostLinear, x: np.ndarray, training: bool = False
) -> tuple[np.ndarray, ForwardCache | None]:
    """Apply the layer; in training mode also return the cache backward needs."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ParameterError(f"input shape {x.shape} does not match in_dim {layer.in_dim}")
    idx = layer.indices.indices
    if layer.combine == "weight_avg":
        y = x @ merge_dense(layer).T
        if not training:
            return y, None
        h = x @ layer.b
        return y, ForwardCache(x=x, h=h, act=h, x_sel=x[:, idx])
    h = x @ layer.b
    act = _activate(layer, h)
    x_sel = x[:, idx]
    y = layer.gamma * (act @ layer.a.T) + (1.0 - layer.gamma) * (x_sel @ layer.w_s.T)
    if not training:
        return y, None
    return y, ForwardCache(x=x, h=h, act=act, x_sel=x_sel)


def backward(
    layer: LostLinear, cache: ForwardCache | None, dy: np.ndarray
) -> tuple[LayerGrads, np.ndarray]:
    """Exact gradients for the forward above; dy has the output's shape."""
    if cache is None:
        raise StateError("backward needs the cache from a training-mode forward")
    dy = np.asarray(dy)
    if dy.shape != (cache.x.shape[0], layer.out_dim):
        raise ParameterError(
            f"dy shape {dy.shape} != ({cache.x.shape[0]}, {layer.out_dim})"
        )
    gamma = layer.gamma
    idx = layer.indices.indices
    g = dy @ layer.a
    gp = g * silu_grad(cache.h) if layer.activation == "silu" else g
    da = gamma * (dy.T @ cache.act)
    db = gamma * (cache.x.T @ gp)
    dw_s = (1.0 - gamma) * (dy.T @ cache.x_sel)
    dx = gamma * (gp @ layer.b.T)
    dx[:, idx] += (1.0 - gamma) * (dy @ layer.w_s)
    return LayerGrads(da=da, db=db, dw_s=dw_s), dx


def merge_dense(layer: LostLinear) -> np.ndarray:
    """Collapse to one m x n dense weight: gamma * a @ b.T plus the sparse
    columns scattered back to their positions. Only equivalent to the
    layer's forward when the activation is the identity."""
    expanded = scatter_cols(layer.w_s, layer.indices.indices, layer.in_dim)
    return layer.gamma * (layer.a @ layer.b.T) + (1.0 - layer.gamma) * expanded

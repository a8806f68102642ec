"""A minimal pre-norm decoder LM whose seven per-block linear maps (q, k,
v, o, ffn gate, ffn up, ffn down) can each be dense, low-rank only, or the
mixed low-rank-plus-sparse layer.

Architecture: token embedding plus learned absolute position embedding,
n_layers blocks of [x + attn(rmsnorm(x)); x + ffn(rmsnorm(x))] with causal
softmax attention and a gated ffn down(silu(gate(u)) * up(u)), a final
rmsnorm, and an untied dense output head. No biases, no dropout. The
embedding and head are always dense.

Forward/backward are handwritten numpy; training-mode forwards return
explicit single-use caches, and parameters are only ever mutated by the
optimizer phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, ParameterError
from .factorize import (
    COMP_SOURCES,
    CRITERIA,
    LOWRANK_INIT_FAMILIES,
    alt_lowrank_init,
    lost_init,
)
from .linalg import RngState, init_matrix, silu, silu_grad
from .lost_layer import ACTIVATIONS, COMBINE_MODES, LostLinear
from .lost_layer import backward as lost_backward
from .lost_layer import forward as lost_forward

RMSNORM_EPS = 1e-6

PARAMETERIZATIONS = ("dense", "lowrank_only", "lost")

LINEAR_FIELDS = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_gate", "ffn_up", "ffn_down")


@dataclass
class ModelConfig:
    """Desk defaults: a 2-layer byte-level model that trains in minutes on
    one CPU. The factorization fields (r through combine) are ignored when
    parameterization is "dense"."""

    n_layers: int = 2
    d_model: int = 64
    d_ff: int = 172
    n_heads: int = 4
    vocab_size: int = 256
    seq_len: int = 128
    parameterization: str = "lost"
    r: int = 16
    rho: float = 0.01
    gamma: float = 0.7
    r_comp: int = 256
    lowrank_init: str = "svd"
    comp_source: str = "rem"
    criterion: str = "l2"
    combine: str = "output_avg"
    activation: str = "silu"
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(
                f"unknown parameterization {self.parameterization!r}, "
                f"expected one of {PARAMETERIZATIONS}"
            )
        if self.parameterization == "dense":
            return
        limit = min(self.d_model, self.d_ff)
        if not 1 <= self.r <= limit:
            raise ConfigError(f"r {self.r} outside [1, {limit}] for this geometry")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.r_comp < 1:
            raise ConfigError(f"r_comp must be >= 1, got {self.r_comp}")
        if self.lowrank_init not in LOWRANK_INIT_FAMILIES:
            raise ConfigError(
                f"unknown lowrank_init {self.lowrank_init!r}, "
                f"expected one of {LOWRANK_INIT_FAMILIES}"
            )
        if self.comp_source not in COMP_SOURCES:
            raise ConfigError(
                f"unknown comp_source {self.comp_source!r}, "
                f"expected one of {COMP_SOURCES}"
            )
        if self.criterion not in CRITERIA:
            raise ConfigError(
                f"unknown criterion {self.criterion!r}, expected one of {CRITERIA}"
            )
        if self.combine not in COMBINE_MODES:
            raise ConfigError(
                f"unknown combine {self.combine!r}, expected one of {COMBINE_MODES}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}, "
                f"expected one of {ACTIVATIONS}"
            )
        if self.combine == "weight_avg" and self.activation != "identity":
            raise ConfigError("combine weight_avg requires activation identity")


@dataclass
class DenseLinear:
    w: np.ndarray  # m x n for an n -> m map


@dataclass
class LowRankLinear:
    a: np.ndarray  # m x r
    b: np.ndarray  # n x r
    activation: str = "silu"


@dataclass
class Block:
    norm1: np.ndarray
    attn_q: object
    attn_k: object
    attn_v: object
    attn_o: object
    norm2: np.ndarray
    ffn_gate: object
    ffn_up: object
    ffn_down: object


class Model:
    def __init__(self, cfg, dtype, embed, pos_embed, blocks, final_norm, head):
        self.cfg = cfg
        self.dtype = dtype
        self.embed = embed
        self.pos_embed = pos_embed
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        """Trainable tensors in a fixed walk order (also the checkpoint and
        optimizer order)."""
        yield "embed", self.embed
        yield "pos_embed", self.pos_embed
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.norm1", blk.norm1
            for name in LINEAR_FIELDS[:4]:
                yield from _linear_param_items(f"block{i}.{name}", getattr(blk, name))
            yield f"block{i}.norm2", blk.norm2
            for name in LINEAR_FIELDS[4:]:
                yield from _linear_param_items(f"block{i}.{name}", getattr(blk, name))
        yield "final_norm", self.final_norm
        yield "head", self.head.w

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable tensors: the channel index list of each mixed layer."""
        for i, blk in enumerate(self.blocks):
            for name in LINEAR_FIELDS:
                lin = getattr(blk, name)
                if isinstance(lin, LostLinear):
                    yield f"block{i}.{name}.idx", lin.indices.indices

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_params())


def _linear_param_items(prefix, lin):
    if isinstance(lin, DenseLinear):
        yield f"{prefix}.W", lin.w
    elif isinstance(lin, LowRankLinear):
        yield f"{prefix}.A", lin.a
        yield f"{prefix}.B", lin.b
    else:
        yield f"{prefix}.A", lin.a
        yield f"{prefix}.B", lin.b
        yield f"{prefix}.Ws", lin.w_s


def linear_shape(name: str, d_model: int, d_ff: int) -> tuple[int, int]:
    """(out_dim, in_dim) of one of the seven per-block maps."""
    if name in ("attn_q", "attn_k", "attn_v", "attn_o"):
        return d_model, d_model
    if name in ("ffn_gate", "ffn_up"):
        return d_ff, d_model
    if name == "ffn_down":
        return d_model, d_ff
    raise ParameterError(f"unknown linear name {name!r}")


def _make_linear(cfg: ModelConfig, m: int, n: int, rng: RngState, dtype):
    if cfg.parameterization == "dense":
        return DenseLinear(init_matrix(m, n, "kaiming", rng.stream("dense_init"), dtype=dtype))
    if cfg.parameterization == "lowrank_only":
        factors = alt_lowrank_init(m, n, cfg.r, cfg.lowrank_init, rng, dtype=dtype)
        return LowRankLinear(a=factors.a, b=factors.b, activation=cfg.activation)
    return lost_init(
        m,
        n,
        cfg.r,
        cfg.rho,
        cfg.gamma,
        comp_source=cfg.comp_source,
        criterion=cfg.criterion,
        lowrank_init=cfg.lowrank_init,
        rng=rng,
        r_comp=min(cfg.r_comp, min(m, n) - 1),
        activation=cfg.activation,
        combine=cfg.combine,
        dtype=dtype,
    )


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    """Deterministic under cfg.seed: every tensor draws from a child stream
    named after the tensor, so layer count changes never shift other draws.

    Embeddings are N(0, 0.02^2), position rows start at zero, the head is a
    Kaiming draw, norm gains start at one.
    """
    cfg.validate()
    root = RngState(cfg.seed)
    d, ff = cfg.d_model, cfg.d_ff
    embed = init_matrix(cfg.vocab_size, d, "gaussian", root.stream("embed"), std=0.02, dtype=dtype)
    pos_embed = np.zeros((cfg.seq_len, d), dtype=dtype)
    head = DenseLinear(init_matrix(cfg.vocab_size, d, "kaiming", root.stream("head"), dtype=dtype))
    blocks = []
    for i in range(cfg.n_layers):
        lins = {
            name: _make_linear(cfg, *linear_shape(name, d, ff), root.stream(f"block{i}.{name}"), dtype)
            for name in LINEAR_FIELDS
        }
        blocks.append(
            Block(norm1=np.ones(d, dtype=dtype), norm2=np.ones(d, dtype=dtype), **lins)
        )
    return Model(cfg, dtype, embed, pos_embed, blocks, np.ones(d, dtype=dtype), head)


# --- norm, softmax, loss ---


@dataclass
class NormCache:
    x: np.ndarray
    inv: np.ndarray


def rmsnorm(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, NormCache]:
    """y = x / sqrt(mean(x^2, last axis) + 1e-6) * gain."""
    ms = np.mean(x * x, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + RMSNORM_EPS)
    return x * inv * gain, NormCache(x=x, inv=inv)


def rmsnorm_backward(
    cache: NormCache, gain: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dyg = dy * gain
    dgain = np.sum(dy * cache.x * cache.inv, axis=tuple(range(dy.ndim - 1)))
    dx = dyg * cache.inv - cache.x * cache.inv**3 * np.mean(
        dyg * cache.x, axis=-1, keepdims=True
    )
    return dx, dgain


def _softmax_lastdim(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_mask(t: int, dtype) -> np.ndarray:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean token-level cross entropy and its exact logits gradient.

    Uniform logits over a vocab of v give ln(v). The gradient is
    (softmax - onehot) / (batch * seq).
    """
    b, t, v = logits.shape
    if targets.shape != (b, t):
        raise ParameterError(f"targets shape {targets.shape} != {(b, t)}")
    flat = logits.reshape(-1, v)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(flat.shape[0])
    cols = targets.ravel()
    loss = float(-logp[rows, cols].mean())
    dflat = np.exp(logp)
    dflat[rows, cols] -= 1.0
    dflat /= flat.shape[0]
    return loss, dflat.reshape(b, t, v)


# --- forward / backward ---


@dataclass
class BlockCache:
    n1c: NormCache
    qc: object
    kc: object
    vc: object
    oc: object
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    p: np.ndarray
    n2c: NormCache
    gatec: object
    upc: object
    downc: object
    g: np.ndarray
    u: np.ndarray
    s_act: np.ndarray


@dataclass
class ModelCaches:
    tokens: np.ndarray
    blocks: list
    finalc: NormCache
    headc: object


@dataclass
class DenseCache:
    x: np.ndarray


@dataclass
class LowRankCache:
    x: np.ndarray
    h: np.ndarray
    act: np.ndarray


def _linear_forward(lin, x: np.ndarray, training: bool):
    if isinstance(lin, LostLinear):
        return lost_forward(lin, x, training)
    if isinstance(lin, DenseLinear):
        return x @ lin.w.T, DenseCache(x) if training else None
    h = x @ lin.b
    act = silu(h) if lin.activation == "silu" else h
    y = act @ lin.a.T
    return y, LowRankCache(x, h, act) if training else None


def _linear_grads(lin, cache, dy: np.ndarray):
    """Returns ({param suffix: grad}, dx) for any of the three layer kinds."""
    if isinstance(lin, LostLinear):
        lg, dx = lost_backward(lin, cache, dy)
        return {"A": lg.da, "B": lg.db, "Ws": lg.dw_s}, dx
    if isinstance(lin, DenseLinear):
        return {"W": dy.T @ cache.x}, dy @ lin.w
    g = dy @ lin.a
    gp = g * silu_grad(cache.h) if lin.activation == "silu" else g
    return {"A": dy.T @ cache.act, "B": cache.x.T @ gp}, gp @ lin.b.T


def _split_heads(x: np.ndarray, b: int, t: int, n_heads: int) -> np.ndarray:
    dk = x.shape[-1] // n_heads
    return x.reshape(b, t, n_heads, dk).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray, b: int, t: int) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b * t, -1)


def _block_forward(blk: Block, x: np.ndarray, mask: np.ndarray, n_heads: int, training: bool):
    b, t, d = x.shape
    n1, n1c = rmsnorm(x, blk.norm1)
    n1f = n1.reshape(b * t, d)
    q, qc = _linear_forward(blk.attn_q, n1f, training)
    k, kc = _linear_forward(blk.attn_k, n1f, training)
    v, vc = _linear_forward(blk.attn_v, n1f, training)
    qh = _split_heads(q, b, t, n_heads)
    kh = _split_heads(k, b, t, n_heads)
    vh = _split_heads(v, b, t, n_heads)
    # python-float scale so float32 activations stay float32
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = qh @ kh.swapaxes(-1, -2) * scale + mask
    p = _softmax_lastdim(scores)
    ctx = _merge_heads(p @ vh, b, t)
    o, oc = _linear_forward(blk.attn_o, ctx, training)
    x1 = x + o.reshape(b, t, d)

    n2, n2c = rmsnorm(x1, blk.norm2)
    n2f = n2.reshape(b * t, d)
    g, gatec = _linear_forward(blk.ffn_gate, n2f, training)
    u, upc = _linear_forward(blk.ffn_up, n2f, training)
    s_act = silu(g)
    dn, downc = _linear_forward(blk.ffn_down, s_act * u, training)
    x2 = x1 + dn.reshape(b, t, d)
    if not training:
        return x2, None
    return x2, BlockCache(
        n1c, qc, kc, vc, oc, qh, kh, vh, p, n2c, gatec, upc, downc, g, u, s_act
    )


def model_forward(model: Model, tokens: np.ndarray, training: bool = False):
    """Logits over the next token at every position; in training mode the
    second return value carries every cache backward needs."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise ParameterError(f"tokens must be a 2-D integer array, got {tokens.dtype} {tokens.shape}")
    b, t = tokens.shape
    cfg = model.cfg
    if t < 1 or t > cfg.seq_len:
        raise DataError(f"sequence length {t} outside [1, {cfg.seq_len}]")
    lo, hi = int(tokens.min()), int(tokens.max())
    if lo < 0 or hi >= cfg.vocab_size:
        raise DataError(f"token id out of range: saw [{lo}, {hi}], vocab {cfg.vocab_size}")
    x = model.embed[tokens] + model.pos_embed[:t]
    mask = _causal_mask(t, model.dtype)
    block_caches = []
    for blk in model.blocks:
        x, bc = _block_forward(blk, x, mask, cfg.n_heads, training)
        block_caches.append(bc)
    nf, finalc = rmsnorm(x, model.final_norm)
    nff = nf.reshape(b * t, cfg.d_model)
    logits, headc = _linear_forward(model.head, nff, training)
    logits = logits.reshape(b, t, cfg.vocab_size)
    if not training:
        return logits, None
    return logits, ModelCaches(tokens=tokens, blocks=block_caches, finalc=finalc, headc=headc)


def _store(grads: dict, prefix: str, frag: dict) -> None:
    for suffix, val in frag.items():
        grads[f"{prefix}.{suffix}"] = val


def _block_backward(
    blk: Block, cache: BlockCache, dy: np.ndarray, n_heads: int, grads: dict, prefix: str
) -> np.ndarray:
    b, t, d = dy.shape
    # ffn path
    frag, d_prod = _linear_grads(blk.ffn_down, cache.downc, dy.reshape(b * t, d))
    _store(grads, f"{prefix}.ffn_down", frag)
    d_s = d_prod * cache.u
    d_u = d_prod * cache.s_act
    d_g = d_s * silu_grad(cache.g)
    frag, d_n2a = _linear_grads(blk.ffn_gate, cache.gatec, d_g)
    _store(grads, f"{prefix}.ffn_gate", frag)
    frag, d_n2b = _linear_grads(blk.ffn_up, cache.upc, d_u)
    _store(grads, f"{prefix}.ffn_up", frag)
    d_n2 = (d_n2a + d_n2b).reshape(b, t, d)
    dx1_norm, dgain2 = rmsnorm_backward(cache.n2c, blk.norm2, d_n2)
    grads[f"{prefix}.norm2"] = dgain2
    d_x1 = dy + dx1_norm

    # attention path
    frag, d_ctx = _linear_grads(blk.attn_o, cache.oc, d_x1.reshape(b * t, d))
    _store(grads, f"{prefix}.attn_o", frag)
    d_ctxh = _split_heads(d_ctx, b, t, n_heads)
    d_p = d_ctxh @ cache.vh.swapaxes(-1, -2)
    d_vh = cache.p.swapaxes(-1, -2) @ d_ctxh
    d_scores = cache.p * (d_p - (d_p * cache.p).sum(axis=-1, keepdims=True))
    d_scores *= 1.0 / math.sqrt(cache.qh.shape[-1])
    d_qh = d_scores @ cache.kh
    d_kh = d_scores.swapaxes(-1, -2) @ cache.qh
    frag, d_n1a = _linear_grads(blk.attn_q, cache.qc, _merge_heads(d_qh, b, t))
    _store(grads, f"{prefix}.attn_q", frag)
    frag, d_n1b = _linear_grads(blk.attn_k, cache.kc, _merge_heads(d_kh, b, t))
    _store(grads, f"{prefix}.attn_k", frag)
    frag, d_n1c = _linear_grads(blk.attn_v, cache.vc, _merge_heads(d_vh, b, t))
    _store(grads, f"{prefix}.attn_v", frag)
    d_n1 = (d_n1a + d_n1b + d_n1c).reshape(b, t, d)
    dx_norm, dgain1 = rmsnorm_backward(cache.n1c, blk.norm1, d_n1)
    grads[f"{prefix}.norm1"] = dgain1
    return d_x1 + dx_norm


def model_backward(model: Model, caches: ModelCaches, dlogits: np.ndarray) -> dict:
    """Gradients for every trainable tensor, keyed by the names
    :meth:`Model.named_params` yields."""
    if caches is None:
        raise ParameterError("model_backward needs caches from a training-mode forward")
    b, t, v = dlogits.shape
    d = model.cfg.d_model
    grads: dict[str, np.ndarray] = {}
    frag, d_nf = _linear_grads(model.head, caches.headc, dlogits.reshape(b * t, v))
    grads["head"] = frag["W"]
    dx, dgain = rmsnorm_backward(caches.finalc, model.final_norm, d_nf.reshape(b, t, d))
    grads["final_norm"] = dgain
    for i in reversed(range(len(model.blocks))):
        dx = _block_backward(
            model.blocks[i], caches.blocks[i], dx, model.cfg.n_heads, grads, f"block{i}"
        )
    dembed = np.zeros_like(model.embed)
    np.add.at(dembed, caches.tokens, dx)
    grads["embed"] = dembed
    dpos = np.zeros_like(model.pos_embed)
    dpos[:t] = dx.sum(axis=0)
    grads["pos_embed"] = dpos
    return grads

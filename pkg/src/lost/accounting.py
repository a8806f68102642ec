"""Closed-form parameter, memory, and storage accounting.

Counts here are formulas over the config, never tensor walks, so the test
suite can check them against actually allocated models. A factorized
n -> m layer costs r * (m + n) + m * k trainable scalars plus k channel
indices, with k = ceil(rho * n); dense costs m * n.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .factorize import channel_count
from .model import LINEAR_FIELDS, ModelConfig, linear_shape


@dataclass
class LayerCount:
    name: str
    shape: tuple[int, int]  # (m, n)
    dense_count: int
    configured_count: int
    index_count: int
    degenerate: bool  # factorized cost >= dense cost


@dataclass
class ParamReport:
    parameterization: str
    rows: list[LayerCount]
    embed_params: int
    pos_params: int
    head_params: int
    norm_params: int
    total_dense: int
    total_configured: int
    total_indices: int


def _layer_counts(cfg: ModelConfig, m: int, n: int) -> tuple[int, int]:
    """(configured trainable count, index count) for one n -> m linear."""
    if cfg.parameterization == "dense":
        return m * n, 0
    if cfg.parameterization == "lowrank_only":
        return cfg.r * (m + n), 0
    k = channel_count(cfg.rho, n)
    return cfg.r * (m + n) + m * k, k


def count_params(cfg: ModelConfig) -> ParamReport:
    """Per-layer and total counts for the configured parameterization next
    to the dense baseline. Matches the allocated model tensor for tensor."""
    cfg.validate()
    rows = []
    for i in range(cfg.n_layers):
        for name in LINEAR_FIELDS:
            m, n = linear_shape(name, cfg.d_model, cfg.d_ff)
            configured, k = _layer_counts(cfg, m, n)
            rows.append(
                LayerCount(
                    name=f"block{i}.{name}",
                    shape=(m, n),
                    dense_count=m * n,
                    configured_count=configured,
                    index_count=k,
                    degenerate=cfg.parameterization != "dense" and configured >= m * n,
                )
            )
    embed = cfg.vocab_size * cfg.d_model
    pos = cfg.seq_len * cfg.d_model
    head = cfg.vocab_size * cfg.d_model
    norms = (2 * cfg.n_layers + 1) * cfg.d_model
    shared = embed + pos + head + norms
    return ParamReport(
        parameterization=cfg.parameterization,
        rows=rows,
        embed_params=embed,
        pos_params=pos,
        head_params=head,
        norm_params=norms,
        total_dense=sum(r.dense_count for r in rows) + shared,
        total_configured=sum(r.configured_count for r in rows) + shared,
        total_indices=sum(r.index_count for r in rows),
    )


ADAM_STATE_TENSORS = 2  # first and second moment, both parameter-shaped

ACTIVATION_FORMULA = (
    "per token: embed d + per block (9d + 4*d_ff + n_heads*seq attention "
    "probabilities + 2r + k per factorized linear) + final norm d + logits "
    "vocab; multiplied by batch * seq * bytes_per_scalar"
)


@dataclass
class MemoryEstimate:
    weight_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    index_bytes: int
    total_bytes: int
    assumptions: dict = field(default_factory=dict)


def _activation_scalars_per_token(cfg: ModelConfig) -> int:
    d, ff = cfg.d_model, cfg.d_ff
    per_block = 9 * d + 4 * ff + cfg.n_heads * cfg.seq_len
    if cfg.parameterization != "dense":
        for name in LINEAR_FIELDS:
            m, n = linear_shape(name, d, ff)
            per_block += 2 * cfg.r  # pre-activation and activated low-rank code
            if cfg.parameterization == "lost":
                per_block += channel_count(cfg.rho, n)  # gathered input columns
    return d + cfg.n_layers * per_block + d + cfg.vocab_size


def memory_estimate(
    cfg: ModelConfig,
    bytes_per_scalar: int = 4,
    optimizer: str = "adam",
    batch: int = 0,
    seq: int | None = None,
) -> MemoryEstimate:
    """Weights + grads + optimizer state + a closed-form activation term.

    Activations scale linearly in batch and are zero at batch 0; Adam state
    is two parameter-shaped tensors. Channel indices are stored as int64.
    The formula used is echoed in the assumptions block.
    """
    if optimizer not in ("adam", "none"):
        raise ParameterError(f"unknown optimizer {optimizer!r}")
    if bytes_per_scalar < 1 or batch < 0:
        raise ParameterError("bytes_per_scalar must be >= 1 and batch >= 0")
    report = count_params(cfg)
    seq = cfg.seq_len if seq is None else seq
    weight = report.total_configured * bytes_per_scalar
    grad = weight
    opt = ADAM_STATE_TENSORS * weight if optimizer == "adam" else 0
    act = batch * seq * _activation_scalars_per_token(cfg) * bytes_per_scalar
    idx = report.total_indices * 8
    return MemoryEstimate(
        weight_bytes=weight,
        grad_bytes=grad,
        optimizer_bytes=opt,
        activation_bytes=act,
        index_bytes=idx,
        total_bytes=weight + grad + opt + act + idx,
        assumptions={
            "bytes_per_scalar": bytes_per_scalar,
            "optimizer": optimizer,
            "adam_state_tensors": ADAM_STATE_TENSORS,
            "batch": batch,
            "seq": seq,
            "index_bytes_each": 8,
            "activation_formula": ACTIVATION_FORMULA,
        },
    )


@dataclass
class SparseStorageReport:
    """Structured (whole input channels) vs element-wise sparsity for one
    m x n weight at density rho, in stored scalar slots.

    Structured needs one index per kept channel. Element-wise needs either
    a full binary mask in the original matrix shape (counted at one slot
    per weight position, the convention the reference totals use) or one
    64-bit index per kept value (one slot each, i.e. 2x the values).
    """

    m: int
    n: int
    rho: float
    structured_values: int
    structured_indices: int
    structured_total: int
    unstructured_values: int
    unstructured_mask_slots: int
    unstructured_total_mask: int
    unstructured_index_slots: int
    unstructured_total_index64: int


def sparse_storage_compare(m: int, n: int, rho: float) -> SparseStorageReport:
    if m < 1 or n < 1:
        raise ParameterError(f"matrix dims must be positive, got {m}x{n}")
    k = channel_count(rho, n)
    sv = m * k
    uv = max(1, min(m * n, int(np.ceil(round(rho * m * n, 9)))))
    return SparseStorageReport(
        m=m,
        n=n,
        rho=rho,
        structured_values=sv,
        structured_indices=k,
        structured_total=sv + k,
        unstructured_values=uv,
        unstructured_mask_slots=m * n,
        unstructured_total_mask=uv + m * n,
        unstructured_index_slots=uv,
        unstructured_total_index64=2 * uv,
    )


@dataclass
class ModelStorageReport:
    structured_total: int
    unstructured_total: int
    shared_params: int  # embeddings, positions, head, norms
    lowrank_params: int


def model_sparse_storage(cfg: ModelConfig) -> ModelStorageReport:
    """Whole-model totals under the two sparsity layouts, holding the
    low-rank part and the dense embeddings/head/norms fixed. Element-wise
    uses the full-mask convention."""
    if cfg.parameterization != "lost":
        raise ParameterError("storage comparison needs parameterization 'lost'")
    report = count_params(cfg)
    shared = report.embed_params + report.pos_params + report.head_params + report.norm_params
    lowrank = 0
    structured = shared
    unstructured = shared
    for i in range(cfg.n_layers):
        for name in LINEAR_FIELDS:
            m, n = linear_shape(name, cfg.d_model, cfg.d_ff)
            per = sparse_storage_compare(m, n, cfg.rho)
            lowrank += cfg.r * (m + n)
            structured += cfg.r * (m + n) + per.structured_values
            unstructured += cfg.r * (m + n) + per.unstructured_total_mask
    return ModelStorageReport(
        structured_total=structured,
        unstructured_total=unstructured,
        shared_params=shared,
        lowrank_params=lowrank,
    )

"""Closed-form parameter, memory, and storage accounting."""

import numpy as np
import pytest

from lost.accounting import (
    count_params,
    memory_estimate,
    model_sparse_storage,
    sparse_storage_compare,
)
from lost.config import reference_model_config
from lost.errors import ParameterError
from lost.model import ModelConfig, build_model


def test_single_layer_mix_arithmetic():
    # one 512 x 512 map at r=128, rho=0.01: 128 * 1024 + 512 * 6
    cfg = ModelConfig(
        n_layers=1, d_model=512, d_ff=512, n_heads=8, vocab_size=4,
        seq_len=4, r=128, rho=0.01,
    )
    report = count_params(cfg)
    q_row = next(r for r in report.rows if r.name == "block0.attn_q")
    assert q_row.configured_count == 128 * 1024 + 512 * 6 == 134144
    assert q_row.index_count == 6
    assert q_row.dense_count == 512 * 512


@pytest.mark.parametrize("parameterization", ["dense", "lowrank_only", "lost"])
def test_counts_match_allocated_tensors(parameterization):
    cfg = ModelConfig(parameterization=parameterization)
    report = count_params(cfg)
    model = build_model(cfg)
    assert report.total_configured == model.param_count()
    assert report.total_indices == sum(b.size for _, b in model.named_buffers())


def test_reference_geometry_totals():
    # (name, dense millions, mixed millions)
    expected = {"60m": (58.2, 43.2), "130m": (134.3, 95.1)}
    for name, (dense_m, lost_m) in expected.items():
        dense = count_params(reference_model_config(name, "dense")).total_configured
        mixed = count_params(reference_model_config(name, "lost")).total_configured
        assert abs(dense / 1e6 - dense_m) < 0.1, name
        assert abs(mixed / 1e6 - lost_m) < 0.1, name
        assert mixed < dense


def test_factorized_grows_monotonically_with_rank():
    from dataclasses import replace

    base = reference_model_config("60m", "lowrank_only")
    totals = [
        count_params(replace(base, r=r)).total_configured for r in (32, 64, 128, 256)
    ]
    assert totals == sorted(totals)


def test_degenerate_rank_is_flagged():
    cfg = ModelConfig(
        n_layers=1, d_model=16, d_ff=16, n_heads=2, vocab_size=8, seq_len=4,
        r=16, rho=1.0,
    )
    report = count_params(cfg)
    assert all(row.degenerate for row in report.rows)
    assert all(row.configured_count >= row.dense_count for row in report.rows)


def test_memory_estimate_composition():
    cfg = reference_model_config("60m")
    est = memory_estimate(cfg, bytes_per_scalar=4, optimizer="adam", batch=0)
    assert est.activation_bytes == 0
    assert est.optimizer_bytes == 2 * est.weight_bytes
    assert est.grad_bytes == est.weight_bytes
    assert est.total_bytes == (
        est.weight_bytes + est.grad_bytes + est.optimizer_bytes
        + est.activation_bytes + est.index_bytes
    )
    plain = memory_estimate(cfg, optimizer="none", batch=0)
    assert plain.optimizer_bytes == 0


def test_memory_activation_term_scales_linearly_in_batch():
    cfg = reference_model_config("60m")
    one = memory_estimate(cfg, batch=1).activation_bytes
    eight = memory_estimate(cfg, batch=8).activation_bytes
    assert eight == 8 * one
    assert one > 0


def test_memory_mixed_model_beats_dense_at_scale():
    lost_est = memory_estimate(reference_model_config("1b", "lost"))
    dense_est = memory_estimate(reference_model_config("1b", "dense"))
    ratio = lost_est.total_bytes / dense_est.total_bytes
    assert ratio < 0.55


def test_memory_estimate_rejects_bad_arguments():
    cfg = reference_model_config("60m")
    with pytest.raises(ParameterError):
        memory_estimate(cfg, optimizer="sgd")
    with pytest.raises(ParameterError):
        memory_estimate(cfg, batch=-1)


def test_storage_compare_small_arithmetic():
    rep = sparse_storage_compare(10, 20, 0.1)
    assert rep.structured_values == 10 * 2
    assert rep.structured_indices == 2
    assert rep.structured_total == 22
    assert rep.unstructured_values == 20
    assert rep.unstructured_mask_slots == 200
    assert rep.unstructured_total_mask == 220
    assert rep.unstructured_total_index64 == 40


def test_storage_structured_total_equals_trainable_params():
    cfg = reference_model_config("60m")
    rep = model_sparse_storage(cfg)
    assert rep.structured_total == count_params(cfg).total_configured
    assert rep.unstructured_total > rep.structured_total


def test_storage_requires_the_mixed_parameterization():
    with pytest.raises(ParameterError):
        model_sparse_storage(reference_model_config("60m", "dense"))

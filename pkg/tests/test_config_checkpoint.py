"""Config parsing/rendering round trips and binary checkpoint integrity."""

import numpy as np
import pytest

from lost.checkpoint import load_checkpoint, restore_model, save_checkpoint
from lost.config import (
    ExperimentConfig,
    load_config,
    parse_config,
    reference_model_config,
    render_config,
)
from lost.errors import CheckpointError, ConfigError
from lost.model import ModelConfig, build_model

TINY = dict(n_layers=1, d_model=8, d_ff=22, n_heads=2, vocab_size=19, seq_len=6, r=2, rho=0.05)


# --- config ---


def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()


def test_parse_reads_each_section():
    cfg = parse_config(
        """
[model]
d_model = 128
gamma = 0.5

[train]
peak_lr = 1e-4
grad_clip_norm = none

[data]
source = synthetic
synthetic_bytes = 4096

[output]
out_dir = /tmp/somewhere
"""
    )
    assert cfg.model.d_model == 128
    assert cfg.model.gamma == 0.5
    assert cfg.train.peak_lr == 1e-4
    assert cfg.train.grad_clip_norm is None
    assert cfg.data.synthetic_bytes == 4096
    assert cfg.output.out_dir == "/tmp/somewhere"


def test_render_parse_round_trip():
    cfg = ExperimentConfig()
    cfg.model.d_model = 96
    cfg.model.n_heads = 6
    cfg.model.gamma = 0.4
    cfg.train.grad_clip_norm = None
    cfg.train.total_steps = 77
    cfg.train.warmup_steps = 11
    cfg.data.seed = 9
    cfg.output.out_dir = "runs/xyz"
    assert parse_config(render_config(cfg)) == cfg


def test_unknown_section_is_an_error_with_line():
    text = "[model]\nd_model = 64\n\n[optimizer]\nlr = 1\n"
    with pytest.raises(ConfigError, match=r"\[optimizer\] at line 4"):
        parse_config(text)


def test_unknown_key_is_an_error_with_line():
    text = "[model]\nd_model = 64\ndropout = 0.1\n"
    with pytest.raises(ConfigError, match="'dropout'.*line 3"):
        parse_config(text)


def test_unparseable_value_is_an_error():
    with pytest.raises(ConfigError, match="d_model"):
        parse_config("[model]\nd_model = tiny\n")


def test_invalid_combination_is_rejected_at_parse_time():
    with pytest.raises(ConfigError):
        parse_config("[model]\nn_heads = 5\n")  # 64 % 5 != 0


def test_grad_clip_norm_accepts_off():
    cfg = parse_config("[train]\ngrad_clip_norm = off\n")
    assert cfg.train.grad_clip_norm is None


def test_load_config_reads_files(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[model]\nd_model = 32\nn_heads = 2\nr = 8\n")
    assert load_config(path).model.d_model == 32


def test_reference_geometries():
    for name in ("60m", "130m", "350m", "1b", "7b"):
        cfg = reference_model_config(name)
        assert cfg.vocab_size == 32000
        assert cfg.seq_len == 256
        assert cfg.parameterization == "lost"
        cfg.validate()
    assert reference_model_config("60M", "dense").parameterization == "dense"
    with pytest.raises(ConfigError):
        reference_model_config("2b")


# --- checkpoint ---


def small_model(**overrides):
    kw = dict(TINY)
    kw.update(overrides)
    cfg = ExperimentConfig(model=ModelConfig(**kw))
    return build_model(cfg.model), cfg


def test_save_load_save_is_byte_identical(tmp_path):
    model, cfg = small_model()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, render_config(cfg))
    restored, _ = restore_model(p1)
    save_checkpoint(p2, restored, render_config(cfg))
    assert p1.read_bytes() == p2.read_bytes()


def test_restore_recovers_every_tensor(tmp_path):
    model, cfg = small_model()
    for _, p in model.named_params():
        p += 0.125  # move away from the fresh-init state
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, render_config(cfg))
    restored, rcfg = restore_model(path)
    assert rcfg.model == cfg.model
    want = dict(model.named_params())
    got = dict(restored.named_params())
    assert set(want) == set(got)
    for name in want:
        assert np.array_equal(want[name], got[name]), name
    for (n1, b1), (n2, b2) in zip(model.named_buffers(), restored.named_buffers()):
        assert n1 == n2 and np.array_equal(b1, b2)
        assert b2.dtype == np.int64


def test_load_returns_config_echo_and_order(tmp_path):
    model, cfg = small_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, render_config(cfg))
    text, tensors = load_checkpoint(path)
    assert parse_config(text) == cfg
    names = list(tensors)
    assert names[0] == "embed"
    assert names[-1].endswith(".idx")
    assert tensors["embed"].dtype == np.float32


def test_checkpoint_rejects_corruption(tmp_path):
    model, cfg = small_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, render_config(cfg))
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)

    trailing = tmp_path / "trail.ckpt"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(trailing)

    bad_version = tmp_path / "ver.ckpt"
    bad_version.write_bytes(blob[:5] + b"\x63\x00\x00\x00" + blob[9:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad_version)


def test_restore_rejects_mismatched_config(tmp_path):
    # tensors from one geometry, config echo from another
    model, _ = small_model()
    _, other_cfg = small_model(d_model=16, r=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, render_config(other_cfg))
    with pytest.raises(CheckpointError, match="shape"):
        restore_model(path)


def test_restore_reports_missing_tensors(tmp_path):
    # a low-rank-only model's tensors cannot satisfy a mixed-layer config
    lr_model, _ = small_model(parameterization="lowrank_only")
    _, lost_cfg = small_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, lr_model, render_config(lost_cfg))
    with pytest.raises(CheckpointError):
        restore_model(path)


def test_restore_requires_a_config_echo(tmp_path):
    model, _ = small_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, "")
    with pytest.raises(CheckpointError, match="config"):
        restore_model(path)


def test_float64_checkpoints_round_trip(tmp_path):
    model, cfg = small_model()
    model64 = build_model(cfg.model, dtype=np.float64)
    path = tmp_path / "m64.ckpt"
    save_checkpoint(path, model64, render_config(cfg))
    restored, _ = restore_model(path)
    assert restored.embed.dtype == np.float64
    assert np.array_equal(restored.embed, model64.embed)

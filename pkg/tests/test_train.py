"""Schedule, optimizer, data plumbing, and the training loop."""

import json
import math

import numpy as np
import pytest

from lost.errors import ConfigError, DataError, NonFiniteGradError
from lost.linalg import RngState, svd
from lost.model import ModelConfig, build_model
from lost.train import (
    MAX_VAL_WINDOWS,
    AdamState,
    ByteDataset,
    TrainConfig,
    adam_step,
    clip_grads,
    evaluate,
    init_adam,
    lr_at,
    make_teacher_dataset,
    synthetic_corpus,
    train_loop,
)

TINY = dict(n_layers=1, d_model=8, d_ff=22, n_heads=2, vocab_size=256, seq_len=16, r=2, rho=0.05)


# --- schedule ---


def test_schedule_endpoints():
    cfg = TrainConfig(total_steps=1000, warmup_steps=100, peak_lr=3e-3, final_lr_fraction=0.1)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 3e-3
    assert abs(lr_at(1000, cfg) - 3e-4) < 1e-18  # cos(pi) = -1 exactly


def test_schedule_linear_warmup():
    cfg = TrainConfig(total_steps=100, warmup_steps=40, peak_lr=1.0)
    for step in range(41):
        assert abs(lr_at(step, cfg) - step / 40) < 1e-15


def test_schedule_cosine_midpoint():
    cfg = TrainConfig(total_steps=300, warmup_steps=100, peak_lr=2.0, final_lr_fraction=0.5)
    # halfway through decay the cosine term is 1/2
    assert abs(lr_at(200, cfg) - 2.0 * (0.5 + 0.5 * 0.5)) < 1e-15


def test_schedule_is_nonincreasing_after_warmup():
    cfg = TrainConfig(total_steps=500, warmup_steps=50)
    values = [lr_at(s, cfg) for s in range(50, 501)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_schedule_without_warmup_starts_at_peak():
    cfg = TrainConfig(total_steps=10, warmup_steps=0, peak_lr=0.5)
    assert lr_at(0, cfg) == 0.5


def test_schedule_rejects_out_of_range_steps():
    cfg = TrainConfig(total_steps=10, warmup_steps=2)
    for step in (-1, 11):
        with pytest.raises(ConfigError):
            lr_at(step, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=30, total_steps=10).validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(grad_clip_norm=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(final_lr_fraction=1.5).validate()
    TrainConfig(grad_clip_norm=None).validate()


# --- clipping ---


def test_clip_rescales_to_the_cap():
    grads = {"a": np.array([3.0, 4.0])}  # norm 5
    pre = clip_grads(grads, 1.0)
    assert abs(pre - 5.0) < 1e-12
    assert abs(math.sqrt(float(np.vdot(grads["a"], grads["a"]))) - 1.0) < 1e-12


def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([0.3, 0.4])}
    before = grads["a"].copy()
    pre = clip_grads(grads, 1.0)
    assert abs(pre - 0.5) < 1e-12
    assert np.array_equal(grads["a"], before)


def test_clip_none_only_measures():
    grads = {"a": np.array([30.0, 40.0])}
    before = grads["a"].copy()
    assert abs(clip_grads(grads, None) - 50.0) < 1e-12
    assert np.array_equal(grads["a"], before)


def test_clip_norm_is_global_across_tensors():
    grads = {"a": np.full(4, 2.0), "b": np.full(9, 2.0)}  # norm sqrt(52)
    pre = clip_grads(grads, 2.0)
    assert abs(pre - math.sqrt(52.0)) < 1e-12
    total = sum(float(np.vdot(g, g)) for g in grads.values())
    assert abs(math.sqrt(total) - 2.0) < 1e-12


# --- adam ---


def reference_adam(params, grad_steps, lr, cfg):
    """Independent scalar-form re-implementation used as the oracle."""
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    out = {k: p.copy() for k, p in params.items()}
    for t, grads in enumerate(grad_steps, start=1):
        for k in out:
            g = grads[k]
            m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
            v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
            m_hat = m[k] / (1 - cfg.beta1**t)
            v_hat = v[k] / (1 - cfg.beta2**t)
            out[k] = out[k] - lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
            if cfg.weight_decay > 0 and not k.endswith("norm1"):
                out[k] = out[k] * (1 - lr * cfg.weight_decay)
    return out


def test_adam_matches_scalar_reference():
    gen = RngState(0).stream("adam").generator()
    cfg = TrainConfig(weight_decay=0.01)
    params = {"w": gen.standard_normal((4, 3)), "block0.norm1": gen.standard_normal(3)}
    grad_steps = [
        {k: gen.standard_normal(p.shape) for k, p in params.items()} for _ in range(5)
    ]
    live = {k: p.copy() for k, p in params.items()}
    state = init_adam(live)
    for grads in grad_steps:
        adam_step(live, {k: g.copy() for k, g in grads.items()}, state, 1e-3, cfg)
    want = reference_adam(params, grad_steps, 1e-3, cfg)
    for k in params:
        assert np.abs(live[k] - want[k]).max() < 1e-12


def test_adam_first_step_size():
    cfg = TrainConfig()
    params = {"w": np.zeros(1)}
    state = init_adam(params)
    adam_step(params, {"w": np.array([1.0])}, state, 0.01, cfg)
    # bias correction makes the first update -lr * g / (|g| + eps)
    assert abs(params["w"][0] + 0.01 / (1 + cfg.eps_adam)) < 1e-15


def test_adam_decay_skips_norm_gains():
    cfg = TrainConfig(weight_decay=0.5)
    params = {"final_norm": np.ones(3), "head": np.ones(3)}
    zero = {k: np.zeros_like(p) for k, p in params.items()}
    state = init_adam(params)
    adam_step(params, zero, state, 0.1, cfg)
    assert np.array_equal(params["final_norm"], np.ones(3))  # zero grad, no decay
    assert np.abs(params["head"] - 0.95).max() < 1e-12  # decayed by 1 - 0.1 * 0.5


def test_adam_rejects_non_finite_gradients():
    params = {"w": np.ones(2)}
    state = init_adam(params)
    with pytest.raises(NonFiniteGradError, match="'w'"):
        adam_step(params, {"w": np.array([1.0, np.nan])}, state, 0.1, TrainConfig())


# --- byte dataset ---


def test_dataset_split_and_window_shapes():
    raw = bytes(range(256)) * 20  # 5120 bytes
    data = ByteDataset(raw, seq_len=32, split_fraction=0.9, seed=0)
    assert len(data.train_tokens) == 4608
    assert len(data.val_tokens) == 512
    x, y = data.sample_train(4)
    assert x.shape == y.shape == (4, 32)
    assert x.dtype == np.int64


def test_dataset_targets_are_shifted_inputs():
    raw = synthetic_corpus(4096, 0)
    data = ByteDataset(raw, seq_len=16, split_fraction=0.9, seed=0)
    x, y = data.sample_train(8)
    assert np.array_equal(x[:, 1:], y[:, :-1])


def test_train_windows_never_touch_the_validation_slice():
    # disjoint alphabets: any window crossing the split would contain a "z"
    raw = b"a" * 4500 + b"z" * 500
    data = ByteDataset(raw, seq_len=16, split_fraction=0.9, seed=0)
    for _ in range(200):
        x, y = data.sample_train(16)
        assert np.all(x == ord("a")) and np.all(y == ord("a"))
    for vx, vy in data.val_batches(64):
        assert np.all(vx == ord("z")) and np.all(vy == ord("z"))


def test_validation_windows_are_fixed_and_disjoint():
    raw = synthetic_corpus(65536, 2)
    data = ByteDataset(raw, seq_len=32, split_fraction=0.9, seed=0)
    batches = list(data.val_batches(1000))
    x = np.concatenate([b[0] for b in batches])
    assert x.shape[0] == min(MAX_VAL_WINDOWS, (len(data.val_tokens) - 1) // 32)
    flat = x.ravel()
    assert np.array_equal(flat, data.val_tokens[: flat.size])  # consecutive, no overlap
    again = np.concatenate([b[0] for b in data.val_batches(1000)])
    assert np.array_equal(x, again)


def test_dataset_sampling_is_seeded():
    raw = synthetic_corpus(8192, 3)
    d1 = ByteDataset(raw, 16, 0.9, seed=5)
    d2 = ByteDataset(raw, 16, 0.9, seed=5)
    d3 = ByteDataset(raw, 16, 0.9, seed=6)
    x1, _ = d1.sample_train(8)
    x2, _ = d2.sample_train(8)
    x3, _ = d3.sample_train(8)
    assert np.array_equal(x1, x2)
    assert not np.array_equal(x1, x3)


def test_dataset_rejects_short_or_degenerate_input():
    with pytest.raises(DataError):
        ByteDataset(b"x" * 100, seq_len=32)  # under 10 windows of material
    with pytest.raises(DataError):
        ByteDataset(b"x" * 4096, seq_len=32, split_fraction=1.5)


def test_synthetic_corpus_properties():
    raw = synthetic_corpus(10000, 0)
    assert len(raw) == 10000
    assert raw == synthetic_corpus(10000, 0)
    assert raw != synthetic_corpus(10000, 1)
    assert max(raw) < 128  # ascii
    text = raw.decode("ascii")
    assert " " in text and "." in text


# --- teacher data ---


def test_teacher_spectrum_is_planted_exactly():
    spec = np.array([4.0, 2.0, 1.0])
    data = make_teacher_dataset(10, 8, 3, noise_std=0.0, count=50, seed=0, spectrum=spec)
    got = svd(data.w_true).s
    assert np.abs(got[:3] - spec).max() < 1e-10
    assert np.abs(got[3:]).max() < 1e-10


def test_teacher_outputs_are_noiseless_at_zero_std():
    data = make_teacher_dataset(6, 5, 2, noise_std=0.0, count=40, seed=1)
    assert np.abs(data.y - data.x @ data.w_true.T).max() < 1e-12


def test_teacher_noise_perturbs_outputs():
    clean = make_teacher_dataset(6, 5, 2, noise_std=0.0, count=40, seed=2)
    noisy = make_teacher_dataset(6, 5, 2, noise_std=0.1, count=40, seed=2)
    resid = noisy.y - noisy.x @ noisy.w_true.T
    assert 0.05 < resid.std() < 0.2
    assert np.array_equal(clean.w_true, noisy.w_true)


def test_teacher_rejects_bad_spectrum():
    with pytest.raises(DataError):
        make_teacher_dataset(6, 5, 2, 0.0, 10, spectrum=np.array([1.0, 2.0]))  # increasing
    with pytest.raises(DataError):
        make_teacher_dataset(6, 5, 9, 0.0, 10)


# --- loop ---


def loop_fixture(total_steps=12, eval_every=4, seed=0, **model_kw):
    kw = dict(TINY)
    kw.update(model_kw)
    mcfg = ModelConfig(**kw, seed=seed)
    model = build_model(mcfg)
    data = ByteDataset(synthetic_corpus(8192, seed), mcfg.seq_len, 0.9, seed)
    tcfg = TrainConfig(
        total_steps=total_steps, warmup_steps=2, eval_every=eval_every,
        batch_size=4, peak_lr=1e-3, seed=seed,
    )
    return model, data, tcfg


def test_zeroed_head_starts_at_log_vocab():
    model, data, _ = loop_fixture()
    model.head.w[:] = 0.0
    assert abs(evaluate(model, data, 8) - math.log(256)) < 1e-6


def test_loop_emits_the_expected_steps(tmp_path):
    model, data, tcfg = loop_fixture(total_steps=10, eval_every=4)
    path = tmp_path / "metrics.jsonl"
    result = train_loop(model, data, tcfg, metrics_path=path)
    assert [r.step for r in result.records] == [0, 4, 8, 10]
    assert not result.halted
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [rec["step"] for rec in lines] == [0, 4, 8, 10]
    assert lines[0]["train_loss"] is None
    for rec in lines[1:]:
        assert rec["tokens_seen"] == rec["step"] * tcfg.batch_size * data.seq_len
        assert abs(rec["val_ppl"] - math.exp(rec["val_loss"])) < 1e-9 * rec["val_ppl"]


def test_loop_learns_a_tiny_corpus():
    model, data, tcfg = loop_fixture(total_steps=60, eval_every=60)
    result = train_loop(model, data, tcfg)
    assert result.records[-1].val_loss < result.records[0].val_loss - 0.5


def test_loop_is_deterministic_in_process():
    r1 = train_loop(*loop_fixture(), deterministic=True)
    r2 = train_loop(*loop_fixture(), deterministic=True)
    assert [r.to_json() for r in r1.records] == [r.to_json() for r in r2.records]
    assert all(r.wallclock_seconds == 0.0 for r in r1.records)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_loop_halts_on_non_finite_loss_and_keeps_the_last_checkpoint(tmp_path):
    from lost.checkpoint import restore_model
    from lost.config import ExperimentConfig, render_config

    model, data, tcfg = loop_fixture(total_steps=10, eval_every=2)
    ckpt = tmp_path / "model.ckpt"
    cfg_text = render_config(ExperimentConfig(model=model.cfg, train=tcfg))

    def sabotage(rec):
        if rec.step == 4:
            model.embed[:] = np.inf  # fires after the step-4 checkpoint is written

    result = train_loop(
        model, data, tcfg, checkpoint_path=ckpt, config_text=cfg_text, log=sabotage
    )
    assert result.halted
    assert "non-finite" in result.halt_reason
    assert result.records[-1].step == 4
    restored, _ = restore_model(ckpt)
    assert np.all(np.isfinite(restored.embed))


def test_loop_zero_steps_only_evaluates(tmp_path):
    model, data, tcfg = loop_fixture(total_steps=0)
    tcfg.warmup_steps = 0
    result = train_loop(model, data, tcfg)
    assert [r.step for r in result.records] == [0]

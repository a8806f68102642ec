"""Optimizer, schedule, data plumbing, and the training loop.

Adam with bias correction and decoupled weight decay (norm gains are never
decayed; the layer mix coefficient gamma is a fixed hyperparameter and not
a tensor at all). Learning rate: linear warmup from zero to the peak, then
cosine decay to final_lr_fraction * peak. The loop is synchronous and
single-worker, so a seed fixes the whole run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NonFiniteGradError
from .linalg import RngState, svd
from .model import Model, cross_entropy, model_backward, model_forward

MAX_VAL_WINDOWS = 64


@dataclass
class TrainConfig:
    """Desk defaults; declared here, not inherited from any larger recipe."""

    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 3e-3
    final_lr_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps_adam: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float | None = 1.0
    batch_size: int = 32
    eval_every: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= max(self.total_steps, 1):
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]"
            )
        if self.peak_lr < 0 or not 0.0 <= self.final_lr_fraction <= 1.0:
            raise ConfigError("peak_lr must be >= 0 and final_lr_fraction in [0, 1]")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.eps_adam <= 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("eps_adam must be > 0, batch_size and eval_every >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or none")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Warmup is linear 0 -> peak over warmup_steps; from there cosine decay
    reaches final_lr_fraction * peak exactly at total_steps. Continuous at
    the warmup boundary."""
    if not 0 <= step <= cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.peak_lr
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps  # > 0 here since step > warmup_steps
    progress = (step - cfg.warmup_steps) / span
    f = cfg.final_lr_fraction
    return cfg.peak_lr * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def _is_norm_gain(name: str) -> bool:
    return name.split(".")[-1] in ("norm1", "norm2") or name == "final_norm"


def clip_grads(grads: dict, max_norm: float | None) -> float:
    """Scale all grads in place so the global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g).real)
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One in-place update. Asserts grads are finite (naming the offending
    tensor), applies bias-corrected Adam, then decoupled weight decay on
    everything except norm gains."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    decay = 1.0 - lr * cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(f"non-finite gradient for tensor {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)
        if cfg.weight_decay > 0.0 and not _is_norm_gain(name):
            p *= decay


@dataclass
class MetricsRecord:
    step: int
    lr: float
    train_loss: float | None
    val_loss: float
    val_ppl: float
    tokens_seen: int
    wallclock_seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# --- data ---


class ByteDataset:
    """A raw byte stream as tokens. The tail split_fraction..1.0 of the file
    is a contiguous validation slice; training samples random windows whose
    targets stay strictly inside the training region, so the two regions
    never overlap. Validation uses up to MAX_VAL_WINDOWS consecutive
    non-overlapping windows, fixed at construction.
    """

    def __init__(self, raw: bytes, seq_len: int, split_fraction: float = 0.9, seed: int = 0):
        if not 0.0 < split_fraction < 1.0:
            raise DataError(f"split_fraction must be in (0, 1), got {split_fraction}")
        if len(raw) < 10 * seq_len:
            raise DataError(
                f"corpus has {len(raw)} bytes, need at least {10 * seq_len} for seq_len {seq_len}"
            )
        buf = np.frombuffer(raw, dtype=np.uint8)
        split = int(len(buf) * split_fraction)
        if split < seq_len + 1 or len(buf) - split < seq_len + 1:
            raise DataError("split leaves a region shorter than one window")
        self.seq_len = seq_len
        self.train_tokens = buf[:split]
        self.val_tokens = buf[split:]
        self._gen = RngState(seed).stream("byte_sampler").generator()
        n_val = min(MAX_VAL_WINDOWS, (len(self.val_tokens) - 1) // seq_len)
        starts = np.arange(n_val) * seq_len
        self._val_x = np.stack([self.val_tokens[s : s + seq_len] for s in starts]).astype(np.int64)
        self._val_y = np.stack(
            [self.val_tokens[s + 1 : s + seq_len + 1] for s in starts]
        ).astype(np.int64)

    def sample_train(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        hi = len(self.train_tokens) - self.seq_len  # targets end at the region's last byte
        offs = self._gen.integers(0, hi, size=batch_size)
        x = np.stack([self.train_tokens[o : o + self.seq_len] for o in offs])
        y = np.stack([self.train_tokens[o + 1 : o + self.seq_len + 1] for o in offs])
        return x.astype(np.int64), y.astype(np.int64)

    def val_batches(self, batch_size: int):
        for i in range(0, len(self._val_x), batch_size):
            yield self._val_x[i : i + batch_size], self._val_y[i : i + batch_size]


def make_byte_dataset(
    path: str | Path, seq_len: int, split_fraction: float = 0.9, seed: int = 0
) -> ByteDataset:
    return ByteDataset(Path(path).read_bytes(), seq_len, split_fraction, seed)


_WORDS = (
    "the of and to in is was for on that with as his they at be this from have or "
    "by one had not but what all were when we there can an your which their said if "
    "will each about how up out them then she many some so these would other into "
    "has more her two like him see time could no make than first been its who now "
    "people my made over did down only way find use may water long little very after "
    "word called just where most know get through back much before go good new"
).split()


def synthetic_corpus(size_bytes: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-text: Zipf-weighted common words grouped into
    sentences. Structured enough that a small byte LM learns quickly, which
    is all the desk experiments need."""
    if size_bytes < 1:
        raise DataError("size_bytes must be >= 1")
    gen = RngState(seed).stream("synthetic_corpus").generator()
    weights = 1.0 / np.arange(1, len(_WORDS) + 1)
    weights /= weights.sum()
    parts: list[str] = []
    total = 0
    while total < size_bytes:
        length = int(gen.integers(6, 13))
        words = [_WORDS[i] for i in gen.choice(len(_WORDS), size=length, p=weights)]
        sentence = " ".join(words) + ".\n"
        parts.append(sentence)
        total += len(sentence)
    return "".join(parts).encode("ascii")[:size_bytes]


@dataclass
class TeacherData:
    """Regression pairs y = x @ w_true.T + noise, with w_true built from a
    known singular spectrum so init effects can be isolated."""

    x: np.ndarray
    y: np.ndarray
    w_true: np.ndarray
    spectrum: np.ndarray


def make_teacher_dataset(
    m: int,
    n: int,
    r_true: int,
    noise_std: float,
    count: int,
    seed: int = 0,
    spectrum: np.ndarray | None = None,
) -> TeacherData:
    if not 1 <= r_true <= min(m, n):
        raise DataError(f"r_true {r_true} outside [1, {min(m, n)}]")
    if spectrum is None:
        spectrum = 10.0 * 0.5 ** np.arange(r_true)
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.size != r_true or np.any(np.diff(spectrum) > 0) or spectrum[-1] <= 0:
        raise DataError("spectrum must be r_true positive non-increasing values")
    root = RngState(seed)
    qu, _ = np.linalg.qr(root.stream("teacher_u").generator().standard_normal((m, r_true)))
    qv, _ = np.linalg.qr(root.stream("teacher_v").generator().standard_normal((n, r_true)))
    w_true = (qu * spectrum) @ qv.T
    gen = root.stream("teacher_xy").generator()
    x = gen.standard_normal((count, n))
    y = x @ w_true.T
    if noise_std > 0:
        y = y + noise_std * gen.standard_normal((count, m))
    return TeacherData(x=x, y=y, w_true=w_true, spectrum=spectrum)


# --- loop ---


@dataclass
class TrainResult:
    records: list
    halted: bool
    halt_reason: str | None = None


def evaluate(model: Model, data: ByteDataset, batch_size: int) -> float:
    """Mean cross entropy over the fixed validation windows."""
    losses = []
    counts = []
    for x, y in data.val_batches(batch_size):
        logits, _ = model_forward(model, x, training=False)
        loss, _ = cross_entropy(logits, y)
        losses.append(loss)
        counts.append(x.shape[0])
    return float(np.average(losses, weights=counts))


def train_loop(
    model: Model,
    data: ByteDataset,
    cfg: TrainConfig,
    *,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    config_text: str = "",
    deterministic: bool = False,
    log=None,
) -> TrainResult:
    """Run cfg.total_steps optimizer steps.

    Metrics are emitted at step 0, every eval_every steps, and at the final
    step, as one JSON object per line when metrics_path is given. A
    checkpoint is written at every emission point, so a non-finite loss or
    gradient halts the run while the file still holds the last good state.
    In deterministic mode wallclock_seconds is reported as 0.0 so two runs
    with one seed produce byte-identical metric streams.
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    cfg.validate()
    params = dict(model.named_params())
    state = init_adam(params)
    records: list[MetricsRecord] = []
    halted = False
    halt_reason = None
    t0 = time.monotonic()
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def emit(step: int, train_loss: float | None) -> None:
        val_loss = evaluate(model, data, cfg.batch_size)
        ppl = math.exp(val_loss) if val_loss < 700.0 else math.inf  # exp overflows past ~709
        rec = MetricsRecord(
            step=step,
            lr=lr_at(step, cfg),
            train_loss=train_loss,
            val_loss=val_loss,
            val_ppl=ppl,
            tokens_seen=step * cfg.batch_size * data.seq_len,
            wallclock_seconds=0.0 if deterministic else time.monotonic() - t0,
        )
        records.append(rec)
        if sink:
            sink.write(rec.to_json() + "\n")
            sink.flush()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, config_text)
        if log:
            log(rec)

    try:
        emit(0, None)
        window: list[float] = []
        for step in range(1, cfg.total_steps + 1):
            lr = lr_at(step, cfg)
            x, y = data.sample_train(cfg.batch_size)
            logits, caches = model_forward(model, x, training=True)
            loss, dlogits = cross_entropy(logits, y)
            if not math.isfinite(loss):
                halted = True
                halt_reason = f"non-finite training loss at step {step}"
                break
            window.append(loss)
            grads = model_backward(model, caches, dlogits)
            clip_grads(grads, cfg.grad_clip_norm)
            try:
                adam_step(params, grads, state, lr, cfg)
            except NonFiniteGradError as exc:
                halted = True
                halt_reason = f"{exc} at step {step}"
                break
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                emit(step, float(np.mean(window)))
                window = []
    finally:
        if sink:
            sink.close()
    return TrainResult(records=records, halted=halted, halt_reason=halt_reason)

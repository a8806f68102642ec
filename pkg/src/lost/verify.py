"""Self-contained property suites behind the ``verify`` subcommand and the
acceptance tests.

Every check compares an implementation against an independent route:
finite differences for gradients, tail-energy identities for truncation,
scalar re-evaluation for selections. Functions return PropertyResult rows
so callers can print them or assert on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lost_layer
from .factorize import (
    ChannelSelection,
    CompSource,
    build_complement,
    select_channels,
    truncate_svd,
)
from .linalg import RngState, frobenius, svd
from .lost_layer import LostLinear
from .model import ModelConfig, build_model, cross_entropy, model_backward, model_forward


@dataclass
class PropertyResult:
    name: str
    tolerance: float
    observed: float
    passed: bool
    detail: str = ""


def _result(name: str, tolerance: float, observed: float, detail: str = "") -> PropertyResult:
    return PropertyResult(name, tolerance, observed, observed <= tolerance, detail)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# --- svd properties ---


def svd_suite(seed: int = 0, n_matrices: int = 40) -> list[PropertyResult]:
    gen = RngState(seed).stream("svd_suite").generator()
    worst_ortho = worst_recon = worst_order = worst_sign = worst_det = 0.0
    for _ in range(n_matrices):
        m = int(gen.integers(1, 65))
        n = int(gen.integers(1, 49))
        w = gen.standard_normal((m, n))
        res = svd(w)
        p = res.p
        worst_ortho = max(
            worst_ortho,
            float(np.abs(res.u.T @ res.u - np.eye(p)).max()),
            float(np.abs(res.v.T @ res.v - np.eye(p)).max()),
        )
        worst_recon = max(worst_recon, frobenius(res.reconstruct() - w) / frobenius(w))
        if np.any(np.diff(res.s) > 0) or np.any(res.s < 0):
            worst_order = 1.0
        for j in range(p):
            nz = np.flatnonzero(res.u[:, j])
            if nz.size and res.u[nz[0], j] < 0:
                worst_sign = 1.0
        res2 = svd(w)
        if not (
            np.array_equal(res.u, res2.u)
            and np.array_equal(res.s, res2.s)
            and np.array_equal(res.v, res2.v)
        ):
            worst_det = 1.0
    return [
        _result("svd orthonormality", 1e-10, worst_ortho),
        _result("svd reconstruction (rel frobenius)", 1e-10, worst_recon),
        _result("svd singular value ordering", 0.0, worst_order),
        _result("svd sign convention", 0.0, worst_sign),
        _result("svd repeat-call determinism", 0.0, worst_det),
    ]


def eckart_young_sweep(seed: int = 0, n_matrices: int = 200) -> PropertyResult:
    """|W - A B^T|_F^2 must equal the truncated tail energy sum(s_i^2, i>r)."""
    gen = RngState(seed).stream("eckart_young").generator()
    worst = 0.0
    for _ in range(n_matrices):
        m = int(gen.integers(2, 65))
        n = int(gen.integers(2, 49))
        w = gen.standard_normal((m, n))
        res = svd(w)
        r = int(gen.integers(1, res.p))
        factors = truncate_svd(res, r)
        lhs = frobenius(w - factors.a @ factors.b.T) ** 2
        rhs = float(np.sum(res.s[r:] ** 2))
        worst = max(worst, abs(lhs - rhs) / max(rhs, 1e-300))
    return _result("rank-r residual equals tail energy", 1e-9, worst)


def decomposition_sweep(seed: int = 0, n_matrices: int = 200) -> list[PropertyResult]:
    """Factors plus the remainder complement rebuild W exactly, and the two
    parts split the squared Frobenius energy."""
    gen = RngState(seed).stream("decomposition").generator()
    worst_sum = worst_energy = 0.0
    for _ in range(n_matrices):
        m = int(gen.integers(2, 65))
        n = int(gen.integers(2, 49))
        w = gen.standard_normal((m, n))
        res = svd(w)
        r = int(gen.integers(1, res.p + 1))
        factors = truncate_svd(res, r)
        low = factors.a @ factors.b.T
        comp = build_complement(res, CompSource("rem", r))
        worst_sum = max(worst_sum, frobenius(low + comp - w) / frobenius(w))
        lhs = frobenius(w) ** 2
        rhs = frobenius(low) ** 2 + frobenius(comp) ** 2
        worst_energy = max(worst_energy, abs(lhs - rhs) / lhs)
    return [
        _result("low-rank + complement rebuilds W (rel)", 1e-10, worst_sum),
        _result("squared-energy split (rel)", 1e-9, worst_energy),
    ]


def topk_oracle_sweep(seed: int = 0, n_cases: int = 100) -> PropertyResult:
    """select_channels against a plain sort with the same tie rule."""
    gen = RngState(seed).stream("topk").generator()
    bad = 0.0
    for _ in range(n_cases):
        n = int(gen.integers(1, 80))
        scores = np.round(gen.standard_normal(n), 1)  # coarse grid forces ties
        k = int(gen.integers(1, n + 1))
        got = select_channels(scores, k).indices
        want = sorted(sorted(range(n), key=lambda i: (-scores[i], i))[:k])
        if list(got) != want:
            bad = 1.0
    return _result("top-k selection matches sort oracle", 0.0, bad)


# --- gradient checks ---


def _random_layer(gen, activation: str, combine: str, gamma: float) -> tuple[LostLinear, np.ndarray]:
    m = int(gen.integers(3, 14))
    n = int(gen.integers(3, 14))
    r = int(gen.integers(1, min(m, n) + 1))
    k = int(gen.integers(1, n + 1))
    idx = np.sort(gen.choice(n, size=k, replace=False))
    layer = LostLinear(
        a=gen.standard_normal((m, r)),
        b=gen.standard_normal((n, r)),
        w_s=gen.standard_normal((m, k)),
        indices=ChannelSelection(idx, strategy=("rand", "l2")),
        gamma=gamma,
        activation=activation,
        combine=combine,
    )
    x = gen.standard_normal((int(gen.integers(1, 6)), n))
    return layer, x


def layer_fd_check(layer: LostLinear, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error of the analytic grads against central differences
    of L = 0.5 * |y|^2 for every entry of a, b, w_s, and x."""

    def loss() -> float:
        y, _ = lost_layer.forward(layer, x, training=False)
        return 0.5 * float(np.vdot(y, y).real)

    y, cache = lost_layer.forward(layer, x, training=True)
    grads, dx = lost_layer.backward(layer, cache, y)

    worst = 0.0
    for arr, analytic in ((layer.a, grads.da), (layer.b, grads.db), (layer.w_s, grads.dw_s), (x, dx)):
        numeric = np.zeros_like(arr)
        flat = arr.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * h)
        worst = max(worst, max_rel_err(analytic, numeric))
    return worst


def layer_gradcheck_sweep(seed: int = 0, n_configs: int = 12) -> list[PropertyResult]:
    """Random layer geometries cycling through both activations, both
    combine modes, and gamma in {0, 0.7, 1}."""
    gen = RngState(seed).stream("layer_gradcheck").generator()
    gammas = (0.0, 0.7, 1.0)
    combos = [("silu", "output_avg"), ("identity", "output_avg"), ("identity", "weight_avg")]
    worst = 0.0
    detail = ""
    for i in range(n_configs):
        # walk the full combo x gamma grid, not two locked cycles
        activation, combine = combos[i % len(combos)]
        gamma = gammas[(i // len(combos)) % len(gammas)]
        layer, x = _random_layer(gen, activation, combine, gamma)
        err = layer_fd_check(layer, x)
        if err > worst:
            worst = err
            detail = f"worst: {activation}/{combine}/gamma={gamma}"
    return [_result("layer grads vs finite differences", 1e-4, worst, detail)]


def model_fd_check(cfg: ModelConfig, seed: int = 0, h: float = 1e-5) -> float:
    """Central-difference check of every trainable entry of a tiny model."""
    model = build_model(cfg, dtype=np.float64)
    gen = RngState(seed).stream("model_fd").generator()
    tokens = gen.integers(0, cfg.vocab_size, size=(2, cfg.seq_len))
    targets = gen.integers(0, cfg.vocab_size, size=(2, cfg.seq_len))

    def loss() -> float:
        logits, _ = model_forward(model, tokens, training=False)
        return cross_entropy(logits, targets)[0]

    logits, caches = model_forward(model, tokens, training=True)
    _, dlogits = cross_entropy(logits, targets)
    grads = model_backward(model, caches, dlogits)

    worst = 0.0
    for name, arr in model.named_params():
        analytic = grads[name]
        flat = arr.ravel()
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        worst = max(worst, max_rel_err(analytic.ravel(), numeric, floor=1e-6))
    return worst


TINY_MODEL_KW = dict(
    n_layers=1, d_model=8, d_ff=22, n_heads=2, vocab_size=11, seq_len=4, r=2, rho=0.05
)


def model_gradcheck_suite(seed: int = 0) -> list[PropertyResult]:
    variants = [
        ("lost silu output_avg g0.7", ModelConfig(**TINY_MODEL_KW)),
        (
            "lost identity weight_avg g0.7",
            ModelConfig(**TINY_MODEL_KW, activation="identity", combine="weight_avg"),
        ),
        (
            "lowrank_only kaiming silu",
            ModelConfig(**TINY_MODEL_KW, parameterization="lowrank_only", lowrank_init="kaiming"),
        ),
        ("dense", ModelConfig(**TINY_MODEL_KW, parameterization="dense")),
    ]
    out = []
    for label, cfg in variants:
        err = model_fd_check(cfg, seed=seed)
        out.append(_result(f"model grads vs finite differences ({label})", 1e-3, err))
    return out


# --- equivalences ---


def combine_equivalence_sweep(seed: int = 0, n_cases: int = 50) -> PropertyResult:
    """output_avg and weight_avg are the same function under the identity
    activation; merge_dense applied by hand must agree too."""
    gen = RngState(seed).stream("combine_equiv").generator()
    worst = 0.0
    for _ in range(n_cases):
        layer, x = _random_layer(gen, "identity", "output_avg", float(gen.uniform(0, 1)))
        weight_form = LostLinear(
            a=layer.a,
            b=layer.b,
            w_s=layer.w_s,
            indices=layer.indices,
            gamma=layer.gamma,
            activation="identity",
            combine="weight_avg",
        )
        y_out, _ = lost_layer.forward(layer, x)
        y_w, _ = lost_layer.forward(weight_form, x)
        y_merge = x @ lost_layer.merge_dense(layer).T
        scale = max(float(np.abs(y_out).max()), 1e-12)
        worst = max(
            worst,
            float(np.abs(y_out - y_w).max()) / scale,
            float(np.abs(y_out - y_merge).max()) / scale,
        )
    return _result("combine-mode equivalence (identity act)", 1e-12, worst)


def gamma_linearity_check(seed: int = 0) -> PropertyResult:
    """forward(gamma) must literally equal gamma * low + (1 - gamma) * sparse."""
    gen = RngState(seed).stream("gamma_lin").generator()
    worst = 0.0
    for gamma in (0.0, 0.3, 1.0):
        layer, x = _random_layer(gen, "silu", "output_avg", gamma)
        low_only = LostLinear(layer.a, layer.b, layer.w_s, layer.indices, 1.0, "silu")
        sp_only = LostLinear(layer.a, layer.b, layer.w_s, layer.indices, 0.0, "silu")
        y, _ = lost_layer.forward(layer, x)
        y_low, _ = lost_layer.forward(low_only, x)
        y_sp, _ = lost_layer.forward(sp_only, x)
        manual = gamma * y_low + (1.0 - gamma) * y_sp
        if not np.array_equal(y, manual):
            worst = max(worst, float(np.abs(y - manual).max()))
    return _result("gamma combination is exact", 0.0, worst)


def adjointness_check(seed: int = 0, n_cases: int = 20) -> PropertyResult:
    """<gather(x), u> == <x, scatter(u)> for unique sorted indices."""
    from .linalg import gather_cols, scatter_cols

    gen = RngState(seed).stream("adjoint").generator()
    worst = 0.0
    for _ in range(n_cases):
        n = int(gen.integers(2, 30))
        k = int(gen.integers(1, n + 1))
        b = int(gen.integers(1, 6))
        idx = np.sort(gen.choice(n, size=k, replace=False))
        x = gen.standard_normal((b, n))
        u = gen.standard_normal((b, k))
        lhs = float(np.vdot(gather_cols(x, idx), u).real)
        rhs = float(np.vdot(x, scatter_cols(u, idx, n)).real)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    return _result("gather/scatter adjointness", 1e-12, worst)


def equivalence_suite(seed: int = 0) -> list[PropertyResult]:
    return [
        combine_equivalence_sweep(seed),
        gamma_linearity_check(seed),
        adjointness_check(seed),
    ]


SUITES = {
    "svd": lambda: svd_suite() + [eckart_young_sweep()],
    "decomp": lambda: decomposition_sweep() + [topk_oracle_sweep()],
    "gradcheck": lambda: layer_gradcheck_sweep() + model_gradcheck_suite(),
    "equivalence": equivalence_suite,
}


def run_suites(names) -> list[PropertyResult]:
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}, expected one of {sorted(SUITES)} or 'all'")
        results.extend(SUITES[name]())
    return results

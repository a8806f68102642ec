"""Command line entry point.

Subcommands: train, ablate, verify, count-params, mem-estimate,
inspect-init. Thread caps (the LOST_THREADS variable, or --deterministic
which forces one thread) are applied to the BLAS environment before numpy
is imported, so the numeric modules are imported lazily inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _configure_threads(deterministic: bool) -> None:
    n = "1" if deterministic else os.environ.get("LOST_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lost", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("config", help="path to an experiment config")
    tr.add_argument("--steps", type=int, default=None, help="override train.total_steps")
    tr.add_argument("--seed", type=int, default=None, help="override model and data seeds")
    tr.add_argument("--out", default=None, help="override output.out_dir")
    tr.add_argument("--deterministic", action="store_true")

    ab = sub.add_parser("ablate", help="run one-axis variant sweeps")
    ab.add_argument("config")
    ab.add_argument("--axis", required=True, choices=sorted(AXES))
    ab.add_argument("--values", default=None, help="comma-separated variant values")
    ab.add_argument("--steps", type=int, default=None)
    ab.add_argument("--out", default=None)
    ab.add_argument("--deterministic", action="store_true")

    ve = sub.add_parser("verify", help="run property suites")
    ve.add_argument("suite", nargs="?", default="all")

    cp = sub.add_parser("count-params", help="parameter accounting table")
    _add_geometry_args(cp)
    cp.add_argument("--records", default=None, help="also write JSON lines here ('-' = stdout)")

    me = sub.add_parser("mem-estimate", help="training memory estimate")
    _add_geometry_args(me)
    me.add_argument("--bytes-per-scalar", type=int, default=4)
    me.add_argument("--optimizer", choices=("adam", "none"), default="adam")
    me.add_argument("--batch", type=int, default=0)
    me.add_argument("--seq", type=int, default=None)
    me.add_argument("--records", default=None)

    ii = sub.add_parser("inspect-init", help="dump spectrum and channel choice for one layer")
    ii.add_argument("--m", type=int, required=True)
    ii.add_argument("--n", type=int, required=True)
    ii.add_argument("--r", type=int, default=16)
    ii.add_argument("--rho", type=float, default=0.01)
    ii.add_argument("--r-comp", type=int, default=None)
    ii.add_argument("--source", default="rem")
    ii.add_argument("--criterion", default="l2")
    ii.add_argument("--seed", type=int, default=0)
    ii.add_argument("--records", default=None)
    return ap


def _add_geometry_args(p) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="experiment config path")
    g.add_argument("--preset", help="reference geometry: 60m, 130m, 350m, 1b, 7b")
    p.add_argument(
        "--parameterization",
        choices=("dense", "lowrank_only", "lost"),
        default=None,
        help="override the parameterization (presets default to lost)",
    )


# axis name -> (config field routine, default values)
AXES = {
    "gamma": [0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    "sparsity": [0.0, 0.01, 0.05, 0.1, 0.2, 0.3],
    "rcomp": None,  # derived from the geometry
    "lowrank-init": ["svd", "kaiming", "xavier", "cola"],
    "combine": ["output_avg", "weight_avg"],
    "activation": ["silu", "identity"],
    "source-criterion": [
        "rem:l2", "bot:l2", "top:l2", "rand:l2", "rem:random",
        "rem:l1", "bot:l1", "top:l1",
        "ini:l2", "ini:l1", "ini:random",
    ],
}


def _apply_axis(model_cfg, axis: str, value: str):
    """Returns (variant label, mutated copy of the model config)."""
    from dataclasses import replace

    from .errors import ConfigError

    if axis == "gamma":
        return value, replace(model_cfg, gamma=float(value))
    if axis == "sparsity":
        rho = float(value)
        if rho == 0.0:
            return "0 (lowrank_only)", replace(model_cfg, parameterization="lowrank_only")
        return value, replace(model_cfg, rho=rho)
    if axis == "rcomp":
        return value, replace(model_cfg, r_comp=int(value))
    if axis == "lowrank-init":
        return value, replace(model_cfg, lowrank_init=value)
    if axis == "combine":
        # both variants drop the inner activation so the routes are comparable
        return value, replace(model_cfg, combine=value, activation="identity")
    if axis == "activation":
        return value, replace(model_cfg, activation=value)
    if axis == "source-criterion":
        try:
            source, criterion = value.split(":")
        except ValueError:
            raise ConfigError(f"source-criterion values look like 'rem:l2', got {value!r}")
        return value, replace(model_cfg, comp_source=source, criterion=criterion)
    raise ConfigError(f"unknown axis {axis!r}")


def _load_experiment(args):
    from .config import load_config

    cfg = load_config(args.config)
    if getattr(args, "steps", None) is not None:
        cfg.train.total_steps = args.steps
        cfg.train.warmup_steps = min(cfg.train.warmup_steps, args.steps)
    if getattr(args, "seed", None) is not None:
        cfg.model.seed = args.seed
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.output.out_dir = args.out
    cfg.validate()
    return cfg


def _make_dataset(cfg):
    from .errors import DataError
    from .train import ByteDataset, make_byte_dataset, synthetic_corpus

    if cfg.data.source == "file":
        return make_byte_dataset(
            cfg.data.path, cfg.model.seq_len, cfg.data.split_fraction, cfg.data.seed
        )
    min_bytes = 10 * cfg.model.seq_len
    if cfg.data.synthetic_bytes < min_bytes:
        raise DataError(
            f"synthetic_bytes {cfg.data.synthetic_bytes} below the {min_bytes} the model needs"
        )
    raw = synthetic_corpus(cfg.data.synthetic_bytes, cfg.data.seed)
    return ByteDataset(raw, cfg.model.seq_len, cfg.data.split_fraction, cfg.data.seed)


def _run_one(cfg, out_dir: Path, deterministic: bool, tag: str = "run"):
    from .config import render_config
    from .model import build_model
    from .train import train_loop

    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model)
    data = _make_dataset(cfg)
    return train_loop(
        model,
        data,
        cfg.train,
        metrics_path=out_dir / f"{tag}.metrics.jsonl",
        checkpoint_path=out_dir / f"{tag}.checkpoint.lost",
        config_text=render_config(cfg),
        deterministic=deterministic,
    )


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    out_dir = Path(cfg.output.out_dir)
    result = _run_one(cfg, out_dir, args.deterministic)
    last = result.records[-1]
    print(
        f"finished at step {last.step}: val_loss {last.val_loss:.4f} "
        f"val_ppl {last.val_ppl:.2f} ({out_dir})"
    )
    if result.halted:
        print(f"HALTED: {result.halt_reason}; last good checkpoint kept", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    from .errors import ConfigError

    cfg = _load_experiment(args)
    axis = args.axis
    if args.values is not None:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    elif axis == "rcomp":
        p = min(cfg.model.d_model, cfg.model.d_ff)
        values = sorted({str(v) for v in (p // 8, p // 4, p // 2, 3 * p // 4, p - 1) if v >= 1})
    else:
        values = [str(v) for v in AXES[axis]]
    if not values:
        raise ConfigError("no variant values given")

    out_dir = Path(cfg.output.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        label, model_cfg = _apply_axis(cfg.model, axis, value)
        variant_cfg = type(cfg)(model=model_cfg, train=cfg.train, data=cfg.data, output=cfg.output)
        variant_cfg.validate()
        tag = f"{axis.replace('-', '_')}_{value.replace(':', '_').replace('.', 'p')}"
        result = _run_one(variant_cfg, out_dir, args.deterministic, tag=tag)
        last = result.records[-1]
        rows.append(
            {
                "axis": axis,
                "variant": label,
                "final_val_loss": last.val_loss,
                "final_val_ppl": last.val_ppl,
                "steps": last.step,
                "halted": result.halted,
            }
        )
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  val_loss  val_ppl")
    for r in rows:
        print(f"{r['variant']:<{width}}  {r['final_val_loss']:8.4f}  {r['final_val_ppl']:7.2f}")
    with open(out_dir / "ablation.jsonl", "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    try:
        results = run_suites(names)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.detail})" if r.detail else ""
        print(f"{status}  {r.name:<{width}}  observed {r.observed:.3e} vs {r.tolerance:.1e}{extra}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} properties hold")
    return 1 if failed else 0


def _geometry_config(args):
    from .config import load_config, reference_model_config

    if args.config:
        model_cfg = load_config(args.config).model
        if args.parameterization:
            from dataclasses import replace

            model_cfg = replace(model_cfg, parameterization=args.parameterization)
        return model_cfg
    return reference_model_config(args.preset, args.parameterization or "lost")


def _emit_records(path: str | None, rows) -> None:
    if not path:
        return
    out = sys.stdout if path == "-" else open(path, "w", encoding="utf-8")
    try:
        for row in rows:
            out.write(json.dumps(row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_count_params(args) -> int:
    from .accounting import count_params, model_sparse_storage

    cfg = _geometry_config(args)
    report = count_params(cfg)
    print(f"parameterization: {report.parameterization}")
    print(f"{'layer':<20} {'shape':<12} {'dense':>12} {'configured':>12} {'idx':>6}")
    for row in report.rows:
        flag = " (>= dense)" if row.degenerate else ""
        print(
            f"{row.name:<20} {row.shape[0]}x{row.shape[1]:<7} {row.dense_count:>12,} "
            f"{row.configured_count:>12,} {row.index_count:>6}{flag}"
        )
    print(f"embeddings {report.embed_params:,}  positions {report.pos_params:,}  "
          f"head {report.head_params:,}  norms {report.norm_params:,}")
    print(f"total dense      {report.total_dense:>14,}")
    print(f"total configured {report.total_configured:>14,}  (+{report.total_indices:,} indices)")
    rows = [
        {
            "layer": r.name, "m": r.shape[0], "n": r.shape[1],
            "dense": r.dense_count, "configured": r.configured_count,
            "indices": r.index_count, "degenerate": r.degenerate,
        }
        for r in report.rows
    ]
    rows.append({"total_dense": report.total_dense, "total_configured": report.total_configured,
                 "total_indices": report.total_indices})
    if cfg.parameterization == "lost":
        storage = model_sparse_storage(cfg)
        print(
            f"storage, channel-structured sparsity: {storage.structured_total:,} slots; "
            f"element-wise with a full mask: {storage.unstructured_total:,} slots"
        )
        rows.append(
            {
                "structured_storage_slots": storage.structured_total,
                "unstructured_storage_slots": storage.unstructured_total,
            }
        )
    _emit_records(args.records, rows)
    return 0


def cmd_mem_estimate(args) -> int:
    from .accounting import memory_estimate

    cfg = _geometry_config(args)
    est = memory_estimate(
        cfg,
        bytes_per_scalar=args.bytes_per_scalar,
        optimizer=args.optimizer,
        batch=args.batch,
        seq=args.seq,
    )
    gib = 1024.0**3
    for label, val in (
        ("weights", est.weight_bytes),
        ("grads", est.grad_bytes),
        ("optimizer", est.optimizer_bytes),
        ("activations", est.activation_bytes),
        ("indices", est.index_bytes),
        ("total", est.total_bytes),
    ):
        print(f"{label:<12} {val:>16,} bytes  ({val / gib:7.3f} GiB)")
    print(f"assumptions: {json.dumps(est.assumptions)}")
    _emit_records(args.records, [est.__dict__])
    return 0


def cmd_inspect_init(args) -> int:
    import numpy as np

    from .factorize import lost_init
    from .linalg import RngState, init_matrix, svd

    rng = RngState(args.seed).stream("inspect")
    layer = lost_init(
        args.m,
        args.n,
        args.r,
        args.rho,
        0.7,
        comp_source=args.source,
        criterion=args.criterion,
        rng=rng,
        r_comp=args.r_comp,
        dtype=np.float64,
    )
    w = init_matrix(args.m, args.n, "kaiming", rng.stream("dense_init"))
    spectrum = svd(w).s
    idx = layer.indices.indices
    importances = np.linalg.norm(w[:, idx], axis=0)
    head = ", ".join(f"{s:.4f}" for s in spectrum[:12])
    print(f"spectrum ({spectrum.size} values): {head}{' ...' if spectrum.size > 12 else ''}")
    print(f"selected {layer.k} of {args.n} channels: {idx.tolist()}")
    print("per-channel column norm of W at the selected channels:")
    print("  " + ", ".join(f"{v:.4f}" for v in importances))
    _emit_records(
        args.records,
        [
            {
                "spectrum": spectrum.tolist(),
                "channels": idx.tolist(),
                "column_norms": importances.tolist(),
                "m": args.m, "n": args.n, "r": args.r, "rho": args.rho,
                "source": args.source, "criterion": args.criterion,
            }
        ],
    )
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _configure_threads(getattr(args, "deterministic", False))
    from .errors import LostError

    handlers = {
        "train": cmd_train,
        "ablate": cmd_ablate,
        "verify": cmd_verify,
        "count-params": cmd_count_params,
        "mem-estimate": cmd_mem_estimate,
        "inspect-init": cmd_inspect_init,
    }
    try:
        return handlers[args.command](args)
    except LostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line entry point.

    python -m tcatseg synth       --out DIR [--teeth 14 --count 8 --seed 0 --wild]
    python -m tcatseg train       --data DIR --out DIR [--config FILE --epochs N --lr X]
    python -m tcatseg eval        --data DIR --out DIR (--checkpoint FILE | --oracle)
    python -m tcatseg grad-check  [--tol 1e-3 --corrupt-op NAME]
    python -m tcatseg dump-tcp    --checkpoint FILE --input FILE --out FILE

Exit codes: 0 success, 1 check failure, 2 usage or validation error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from contextlib import nullcontext
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from tcatseg import config as cfg
from tcatseg import data
from tcatseg import diffcore as dc
from tcatseg.errors import GradCheckError, NumericalAbort, TcatError, ValidationError
from tcatseg.gradcheck import CheckReport, finite_diff_check, primitive_suite
from tcatseg.metrics import METRIC_KEYS, MetricsReport, evaluate, extract_instances
from tcatseg.network import (
    ModelConfig,
    ModelParams,
    forward,
    init_model,
    load_model,
    make_targets,
    predict_full,
    prepare,
)
from tcatseg.report_templates import render_flat, render_report
from tcatseg.train import (
    OPTIMIZERS,
    Sample,
    TrainConfig,
    load_sample,
    load_samples,
    sample_loss,
    train,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

MODEL_CFG = "model.cfg"
TRAIN_CFG = "train.cfg"

# reduced model used by grad-check: 64 points, 2 levels
GRAD_CHECK_MODEL = ModelConfig(
    n_input=64,
    n_levels=2,
    widths=(8, 16),
    radii=(0.3, 0.6),
    k_neighbors=8,
    n_classes=5,
    stem_width=8,
    decoder_width=8,
)


# ----------------------------- argument parsing ------------------------------


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument(
        "--config", default=None, help=f"key = value or .json file (env {cfg.CONFIG_ENV})"
    )
    g.add_argument("--n-input", type=int, default=None)
    g.add_argument("--levels", type=int, default=None, dest="n_levels")
    g.add_argument("--widths", default=None, help="comma separated, one per level")
    g.add_argument("--radii", default=None, help="comma separated, one per level")
    g.add_argument("--k-neighbors", type=int, default=None)
    g.add_argument("--classes", type=int, default=None, dest="n_classes")
    g.add_argument("--seed", type=int, default=None)


def _parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="tcatseg", description="Superpoint-guided tooth segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic dental arches")
    s.add_argument("--out", required=True)
    s.add_argument("--teeth", type=int, default=14)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points-per-tooth", type=int, default=data.ArchSpec.points_per_tooth)
    s.add_argument("--gingiva-points", type=int, default=data.ArchSpec.gingiva_points)
    s.add_argument("--crowding", type=float, default=0.0)
    s.add_argument("--scatter", type=float, default=0.0)
    s.add_argument("--jitter", type=float, default=data.ArchSpec.jitter)
    s.add_argument("--curvature", type=float, default=data.ArchSpec.curvature)
    s.add_argument("--missing", default="", help="comma separated 1-based tooth positions")
    s.add_argument("--wild", action="store_true", help="draw irregular arches per file")
    s.add_argument("--n-points", type=int, default=None, help="resample every cloud to this size")

    t = sub.add_parser("train", help="fit a model on a directory of clouds")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None, dest="learning_rate")
    t.add_argument("--momentum", type=float, default=None)
    t.add_argument("--lr-decay", type=float, default=None)
    t.add_argument("--optimizer", choices=OPTIMIZERS, default=None)
    _model_flags(t)

    e = sub.add_parser("eval", help="score a checkpoint on a directory of clouds")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--oracle", action="store_true", help="ground truth as prediction (self-test)")
    _model_flags(e)

    g = sub.add_parser("grad-check", help="finite-difference check of every backward rule")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-3, help="tolerance for the model check")
    g.add_argument("--op-tol", type=float, default=1e-4, help="tolerance for primitive checks")
    g.add_argument("--trials", type=int, default=20, help="random trials per primitive")
    g.add_argument("--entries", type=int, default=3, help="entries sampled per parameter")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt-op", default=None, help="test hook: break one backward rule")

    d = sub.add_parser("dump-tcp", help="write superpoint positions of every level")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    _model_flags(d)

    return p.parse_args(argv)


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="[%(name)s] %(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


# ----------------------------- configuration ---------------------------------


def _load_configs(
    args: argparse.Namespace, fallback: Path | None = None
) -> tuple[ModelConfig, TrainConfig]:
    path = cfg.resolve_config_path(args.config)
    if path is None and fallback is not None and fallback.exists():
        path = str(fallback)
    mapping = cfg.load_config(path) if path else {}
    model, training = cfg.split_config(mapping, ModelConfig, TrainConfig)
    if path:
        log.info("config: %s", path)

    overrides: dict[str, Any] = {}
    for key in ("n_input", "n_levels", "k_neighbors", "n_classes", "seed"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    for key, kind in (("widths", int), ("radii", float)):
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = cfg.coerce(raw, tuple[kind, ...], key)
    model = replace(model, **overrides).validate()

    t_over = {
        key: getattr(args, key)
        for key in ("epochs", "learning_rate", "momentum", "lr_decay", "optimizer")
        if getattr(args, key, None) is not None
    }
    return model, replace(training, **t_over).validate()


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise ValidationError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _cloud_files(data_dir: str) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise ValidationError(f"data directory not found: {d}")
    paths = data.list_clouds(d)
    if not paths:
        raise ValidationError(f"no .tcat clouds in {d}")
    return paths


# ----------------------------- commands --------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    missing = tuple(int(x) for x in args.missing.split(",") if x.strip())
    base = data.ArchSpec(
        n_teeth=args.teeth,
        curvature=args.curvature,
        jitter=args.jitter,
        crowding=args.crowding,
        scatter=args.scatter,
        missing=missing,
        points_per_tooth=args.points_per_tooth,
        gingiva_points=args.gingiva_points,
        seed=args.seed,
    )
    base.validate()
    if args.count < 1:
        raise ValidationError(f"--count must be positive, got {args.count}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wild_rng = np.random.default_rng(args.seed) if args.wild else None
    entries = []
    for i in range(args.count):
        spec = replace(base, seed=args.seed + i)
        if wild_rng is not None:
            spec = data.wild_spec(spec, wild_rng)
        cloud = data.generate_arch(spec)
        if args.n_points is not None:
            cloud = data.resample(cloud, args.n_points, seed=spec.seed)
        name = f"arch_{i:03d}.tcat"
        data.write_cloud(out / name, cloud)
        entries.append(
            {
                "file": name,
                "seed": spec.seed,
                "points": cloud.n,
                "teeth": cloud.n_teeth,
                "spec": asdict(spec),
            }
        )
        log.info("wrote %s (%d points, %d teeth)", name, cloud.n, cloud.n_teeth)

    manifest = {"count": args.count, "wild": bool(args.wild), "files": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"Wrote {args.count} clouds + manifest to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    model_cfg, train_cfg = _load_configs(args)
    paths = _cloud_files(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / MODEL_CFG).write_text(cfg.dump_config(model_cfg), encoding="utf-8")
    (out / TRAIN_CFG).write_text(cfg.dump_config(train_cfg), encoding="utf-8")

    samples = load_samples(paths, model_cfg)
    log.info("training on %d clouds of %d points", len(samples), model_cfg.n_input)
    params = init_model(model_cfg)
    history = train(samples, model_cfg, train_cfg, params, out, progress=not args.quiet)
    if history:
        print(f"epoch 1 total={history[0].total:.6g} final total={history[-1].total:.6g}")
    print(f"Wrote checkpoint: {out / 'model.tcat'}")
    return EXIT_OK


def _write_tcp(path: Path, levels: Sequence[np.ndarray]) -> None:
    lines = ["# level index x y z"]
    for level, ys in enumerate(levels, start=1):
        lines.extend(f"{level} {i} {y[0]!r} {y[1]!r} {y[2]!r}" for i, y in enumerate(ys))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _evaluate_file(
    path: Path, model_cfg: ModelConfig, params: ModelParams | None, tcp_dir: Path
) -> MetricsReport:
    if params is None:
        raw = data.read_cloud(path)
        teeth = extract_instances(raw.points, raw.labels, raw.instances)
        tcp = np.stack([t.centroid for t in teeth]) if teeth else np.zeros((0, 3))
        return evaluate(raw.labels, tcp, raw.points, raw.labels, raw.instances, model_cfg.n_classes)

    sample = load_sample(path, model_cfg)
    out = forward(sample.cloud, model_cfg, params, sample.prepared)
    pred = predict_full(sample.raw, sample.cloud, out)
    tcp_levels = out.tcp_raw()
    _write_tcp(tcp_dir / f"{sample.name}.tcp", tcp_levels)
    raw = sample.raw
    n_classes = model_cfg.n_classes
    return evaluate(pred, tcp_levels[-1], raw.points, raw.labels, raw.instances, n_classes)


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = None if args.oracle else _require_file(args.checkpoint, "checkpoint")
    model_cfg, _ = _load_configs(args, fallback=None if ckpt is None else ckpt.parent / MODEL_CFG)
    params = None if ckpt is None else load_model(ckpt, model_cfg)
    paths = _cloud_files(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for path in paths:
        report = _evaluate_file(path, model_cfg, params, out / "tcp")
        rows.append({"file": path.name, **report.as_dict()})
        log.info("%s: OA=%.4f TIR=%.4f score=%.4f", path.name, report.oa, report.tir, report.score)

    table = pd.DataFrame(rows, columns=["file", *METRIC_KEYS])
    table.to_csv(out / "per_file.csv", index=False)
    aggregate = {k: float(v) for k, v in table[list(METRIC_KEYS)].mean().items()}
    per_file = [(r["file"], {k: r[k] for k in METRIC_KEYS}) for r in rows]
    title = "Oracle self-test" if args.oracle else f"Evaluation of {args.checkpoint}"
    (out / "aggregate.txt").write_text(render_flat(aggregate), encoding="utf-8")
    (out / "report.md").write_text(render_report(title, per_file, aggregate), encoding="utf-8")
    print(render_flat(aggregate), end="")
    return EXIT_OK


def _reduced_problem(seed: int) -> tuple[ModelConfig, ModelParams, Sample]:
    model_cfg = replace(GRAD_CHECK_MODEL, seed=seed).validate()
    spec = data.ArchSpec(n_teeth=4, points_per_tooth=20, gingiva_points=40, seed=seed)
    cloud = data.resample(data.generate_arch(spec), model_cfg.n_input, seed=seed)
    prepared = prepare(cloud, model_cfg)
    sample = Sample("reduced", cloud, cloud, prepared, make_targets(cloud, prepared.frame))
    params = init_model(model_cfg)
    # zero biases put every self-neighbour pre-activation exactly on a ReLU kink
    rng = np.random.default_rng(seed)
    for name, p in params.named().items():
        if name.endswith(".bias"):
            p.data = rng.uniform(-0.1, 0.1, size=p.shape)
    return model_cfg, params, sample


def run_grad_check(
    eps: float = 1e-5,
    tol: float = 1e-3,
    op_tol: float = 1e-4,
    trials: int = 20,
    entries: int | None = 3,
    seed: int = 0,
) -> dict[str, CheckReport]:
    """Primitive suite (``op.*``) plus the total loss of the reduced model (``model``)."""
    reports = {f"op.{k}": v for k, v in primitive_suite(trials, seed, eps, op_tol).items()}
    model_cfg, params, sample = _reduced_problem(seed)

    def objective() -> dc.Tensor:
        total, _, _ = sample_loss(sample, model_cfg, params)
        return total

    reports["model"] = finite_diff_check(
        objective, params.named(), eps=eps, tol=tol, max_entries=entries, seed=seed
    )
    return reports


def cmd_grad_check(args: argparse.Namespace) -> int:
    hook = dc.corrupt_backward(args.corrupt_op) if args.corrupt_op else nullcontext()
    with hook:
        reports = run_grad_check(
            eps=args.eps,
            tol=args.tol,
            op_tol=args.op_tol,
            trials=args.trials,
            entries=args.entries,
            seed=args.seed,
        )

    failed = []
    print(f"{'group':<40} {'max rel err':>12}  status")
    for name, report in reports.items():
        groups = report.by_group() if name == "model" else {name: report.max_rel_err}
        for group, err in groups.items():
            label = group if name != "model" else f"model.{group}"
            ok = err <= report.tol
            if not ok:
                failed.append(label)
            print(f"{label:<40} {err:>12.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"FAILED groups: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    print("all gradient checks passed")
    return EXIT_OK


def cmd_dump_tcp(args: argparse.Namespace) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    cloud_path = _require_file(args.input, "input cloud")
    model_cfg, _ = _load_configs(args, fallback=ckpt.parent / MODEL_CFG)
    params = load_model(ckpt, model_cfg)
    sample = load_sample(cloud_path, model_cfg)
    out = forward(sample.cloud, model_cfg, params, sample.prepared)
    _write_tcp(Path(args.out), out.tcp_raw())
    print(f"Wrote superpoints: {args.out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "dump-tcp": cmd_dump_tcp,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = _parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except GradCheckError as exc:
        log.error("gradient check failed on %s: %s", exc.param, exc)
        return EXIT_CHECK_FAILED
    except (TcatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())

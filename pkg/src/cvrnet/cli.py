"""``cvrnet`` command line: split, train, evaluate, predict, foldavg, metrics, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numerical abort, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics, verify
from .checkpoint import CheckpointError, atomic_write, load_checkpoint, load_into
from .config import ConfigError, RunConfig, derive_seed, resolve
from .data import (
    DatasetError,
    FoldPlan,
    ImageFormatError,
    ImageLoader,
    class_weights,
    fixed_split_plan,
    load_and_resize,
    make_folds,
    scan_dataset,
    scan_fixed_split,
)
from .model import build
from .ops import ShapeError
from .training import NumericalError, fit

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERICAL, EXIT_MISMATCH = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def _echo(msg: str = "") -> None:
    print(msg, flush=True)


def write_manifest(out: Path, command: str) -> None:
    """``manifest.json``: every file under ``out`` with size and sha256 (sorted, no timestamps)."""
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."):
            data = p.read_bytes()
            entries.append({"path": p.relative_to(out).as_posix(), "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
    atomic_write(out / "manifest.json", (json.dumps({"command": command, "artifacts": entries}, indent=1) + "\n").encode())


def _out_dir(path) -> Path:
    if not path:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _class_counts_table(index, plan: FoldPlan) -> str:
    names = index.class_names
    labels = index.labels
    lines = [f"{'fold':<6}{'role':<7}" + "".join(f"{n:>10}" for n in names)]
    for f, fold in enumerate(plan.folds):
        for role in ("train", "val", "test"):
            ids = fold.role(role)
            counts = np.bincount(labels[ids], minlength=len(names)) if ids else np.zeros(len(names), int)
            lines.append(f"{f:<6}{role:<7}" + "".join(f"{int(c):>10}" for c in counts))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Commands


def cmd_split(args) -> int:
    cfg = resolve(args.config, {"data": args.data, "k": args.k, "seed": args.seed, "val_frac": args.val_frac})
    if not cfg.data:
        raise UsageError("--data is required")
    if not args.out:
        raise UsageError("--out is required")
    index = scan_dataset(cfg.data)
    for path, reason in index.skipped:
        _echo(f"skipped {path}: {reason}")
    plan = make_folds(index, cfg.k, derive_seed(cfg.seed, "folds"), cfg.val_frac)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(out, plan.to_json().encode())
    _echo(_class_counts_table(index, plan))
    _echo(f"wrote {out}")
    return EXIT_OK


def _dataset_and_plan(cfg: RunConfig, plan_path):
    if cfg.fixed_split:
        index, train_ids, test_ids = scan_fixed_split(cfg.fixed_split)
        plan = fixed_split_plan(index, train_ids, test_ids, derive_seed(cfg.seed, "folds"), cfg.val_frac)
        return index, plan
    if not cfg.data:
        raise UsageError("either --data (with --plan) or --fixed-split is required")
    index = scan_dataset(cfg.data)
    if plan_path:
        plan = FoldPlan.load(plan_path)
    else:
        plan = make_folds(index, cfg.k, derive_seed(cfg.seed, "folds"), cfg.val_frac)
    if any(i >= len(index) for fold in plan.folds for i in fold.test + fold.train + fold.val):
        raise MismatchError(f"plan refers to samples beyond the {len(index)} found under {cfg.data}")
    return index, plan


def _weights(cfg: RunConfig, index, ids):
    if cfg.weight_mode == "none":
        return None
    counts = np.bincount(index.labels[ids], minlength=index.num_classes)
    return class_weights(counts, cfg.weight_mode).weights


def cmd_train(args) -> int:
    overrides = {"data": args.data, "fixed_split": args.fixed_split, "epochs": args.epochs,
                 "seed": args.seed, "workers": args.workers, "deterministic": True if args.deterministic else None}
    cfg = resolve(args.config, overrides)
    out = _out_dir(args.out or cfg.out)
    index, plan = _dataset_and_plan(cfg, args.plan)
    plan.fold(args.fold)  # range check before any work
    k = cfg.num_classes or index.num_classes
    if k != index.num_classes:
        raise MismatchError(f"config num_classes={k} but the dataset has {index.num_classes} classes")
    model = build(cfg.model_config(k), init_seed=derive_seed(cfg.seed, "init"))
    if args.init_from:
        rep = load_into(model, args.init_from, partial=True)
        _echo(rep.summary())
    atomic_write(out / "config.resolved", cfg.to_text().encode())
    train_ids = plan.fold(args.fold).train
    cw = _weights(cfg, index, train_ids)
    report, _ = fit(model, index, plan, args.fold, cfg.train_config(), cfg.augment_config(), cw,
                    out_dir=out, log=_echo, timing=not cfg.deterministic)
    _echo(f"best epoch {report.best_epoch}; checkpoint {out / 'best.ckpt'}")
    write_manifest(out, "train")
    return EXIT_OK


def _predictions_csv(index, ids, probs, preds) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "path", "actual", "predicted"] + [f"p_{n}" for n in index.class_names])
    for i, p, row in zip(ids, preds, probs):
        path, label = index.samples[i]
        w.writerow([i, path, index.class_names[label], index.class_names[p]] + [f"{v:.6f}" for v in row])
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    cfg = resolve(args.config, {"data": args.data, "fixed_split": args.fixed_split, "seed": args.seed})
    out = _out_dir(args.out or cfg.out)
    try:
        model = load_checkpoint(args.model)
    except (CheckpointError, OSError) as exc:
        raise MismatchError(f"cannot load checkpoint {args.model}: {exc}") from None
    index, plan = _dataset_and_plan(cfg, args.plan)
    fold = 0 if cfg.fixed_split else args.fold
    ids = plan.fold(fold).test
    if not ids:
        raise DatasetError(f"fold {fold} has an empty test set")
    if model.config.num_classes != index.num_classes:
        raise MismatchError(f"checkpoint has {model.config.num_classes} classes, dataset has {index.num_classes}")
    loader = ImageLoader((model.config.input_h, model.config.input_w))
    probs = []
    batch = cfg.batch_size
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        imgs = np.stack([loader(index.samples[i][0]) for i in chunk])
        probs.append(model.predict(imgs)[0])
    probs = np.concatenate(probs)
    preds = np.argmax(probs, axis=1)
    report = metrics.evaluate_predictions(preds, index.labels[ids], index.num_classes, list(index.class_names))
    metrics.emit_report(report, "json", out / "metrics.json")
    metrics.emit_report(report, "csv", out / "confusion.csv")
    text = metrics.emit_report(report, "text", out / "report.txt")
    atomic_write(out / "predictions.csv", _predictions_csv(index, ids, probs, preds).encode())
    _echo(text)
    write_manifest(out, "evaluate")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        model = load_checkpoint(args.model)
    except (CheckpointError, OSError) as exc:
        raise MismatchError(f"cannot load checkpoint {args.model}: {exc}") from None
    size = (model.config.input_h, model.config.input_w)
    for path in args.images:
        p, label = model.predict(load_and_resize(path, size))
        probs = " ".join(f"{v:.4f}" for v in p[0])
        _echo(f"{path}\t{int(label[0])}\t{probs}")
    return EXIT_OK


def cmd_foldavg(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(metrics.MetricsReport.from_dict(json.loads(Path(path).read_text())))
        except (KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"{path}: not a metrics report ({exc})") from None
    summary = metrics.fold_average(reports, args.mode)
    header = "  ".join(["fold"] + [m for m in metrics.METRICS])
    lines = [header]
    for i, r in enumerate(reports, 1):
        agg = r.weighted if args.mode == "weighted" else r.macro
        lines.append("  ".join([f"Fold-{i}"] + [f"{float(agg[m]):.3f}" for m in metrics.METRICS]))
    lines.append(summary.table_row("Average"))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    _echo(text.rstrip())
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        cm = metrics.confusion_from_csv(Path(args.cm).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {args.cm}: {exc}") from None
    report = metrics.evaluate_confusion(cm)
    text = metrics.emit_report(report, args.format, args.out)
    _echo(text.rstrip())
    return EXIT_OK


def cmd_verify(args) -> int:
    outcomes = []
    if args.suite in ("shapes", "all"):
        outcomes += verify.run_shapes_suite()
    if args.suite in ("gradcheck", "all"):
        outcomes += verify.run_gradcheck_suite(args.seeds)
    _echo(verify.format_table(outcomes))
    failed = [o for o in outcomes if not o.ok]
    if failed:
        _echo(f"first failure: {failed[0].name}: {failed[0].detail}")
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvrnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a stratified k-fold plan")
    p.add_argument("--data")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-frac", type=float)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--fixed-split")
    p.add_argument("--plan")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-from", help="checkpoint to import matching weights from")
    p.add_argument("--deterministic", action="store_true", help="zero wall times so outputs are byte-identical")
    p.add_argument("--workers", type=int, help="accepted for compatibility; loading is sequential")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a fold's test role")
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--fixed-split")
    p.add_argument("--plan")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="accepted for compatibility; loading is sequential")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="ensemble probabilities for image files")
    p.add_argument("--model", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("foldavg", help="mean +- std over per-fold metrics.json reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--mode", choices=("weighted", "macro"), default="weighted")
    p.add_argument("--out")
    p.set_defaults(func=cmd_foldavg)

    p = sub.add_parser("metrics", help="recompute metrics from a confusion-matrix CSV")
    p.add_argument("--cm", required=True)
    p.add_argument("--format", choices=("json", "csv", "text"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify", help="shape conformance and gradient-check suites")
    p.add_argument("--suite", choices=("shapes", "gradcheck", "all"), default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MismatchError, CheckpointError, ShapeError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (UsageError, ConfigError, DatasetError, ImageFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: ingest, split, augment, patch, train, eval, gradcheck,
report. Global flags (--config, --seed, --out, --threads) are accepted by
every subcommand. Exit codes: 0 success, 1 usage/config error, 2 data or
I/O error, 3 numeric failure (diverged training, failed gradient check).

Every command writes its artifacts atomically under --out, echoes the
fully resolved configuration to <out>/config.json, and prints a short
machine-parsable summary (key=value pairs) on success or a one-line
`error: <Type>: <message>` on stderr on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import (augment_config_from, config_help_text, model_config_from,
                     resolve_config, train_config_from)
from .errors import ConfigError, DataError, NumericError, ShapeError
from .gradcheck import GradientMismatch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this front end reserves
    2 for data errors, so usage problems are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: ConfigError: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="root random seed (default 0)")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default .)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap math-library thread pools (exported to the environment)")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="irrcnn",
        description="Histopathology classifier toolkit: data pipeline, training, "
                    "evaluation, and gradient verification.",
        epilog=config_help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="scan an image tree into a manifest")
    p.add_argument("--root", help="dataset root directory (overrides dataset.root)")
    p.add_argument("--dataset", choices=("breakhis", "challenge2015"),
                   help="dataset layout (overrides dataset.id)")

    p = sub.add_parser("split", parents=[common], help="assign train/test splits by patient")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--train-frac", type=float, default=0.7,
                   help="target train fraction of samples (default 0.7)")

    p = sub.add_parser("augment", parents=[common], help="write randomized augmented copies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test", "unassigned"),
                   help="restrict to one split (default: all records)")
    p.add_argument("--outputs", type=int, default=None,
                   help="images per input including the original (overrides pipeline.outputs_per_input)")

    p = sub.add_parser("patch", parents=[common], help="extract center or random patches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("center", "random"), default=None,
                   help="patch placement (overrides pipeline.mode)")
    p.add_argument("--size", type=int, default=None, help="patch side (overrides pipeline.size)")
    p.add_argument("--count", type=int, default=None,
                   help="random patches per image (overrides pipeline.patch_count)")
    p.add_argument("--split", choices=("train", "test", "unassigned"),
                   help="restrict to one split (default: all records)")

    p = sub.add_parser("train", parents=[common], help="train the classifier on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lr", type=float, default=None, help="overrides train.initial_lr")
    p.add_argument("--trials", type=int, default=None, help="overrides train.trials")
    p.add_argument("--epochs-per-trial", type=int, default=None,
                   help="overrides train.epochs_per_trial")
    p.add_argument("--batch-size", type=int, default=None, help="overrides train.batch_size")
    p.add_argument("--val-fraction", type=float, default=None, help="overrides train.val_fraction")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   help="overrides train.checkpoint_every")
    p.add_argument("--restarts", type=int, default=1,
                   help="independent runs with seeds seed..seed+N-1 (default 1)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--level", choices=("image", "patient"), default=None,
                   help="overrides eval.level")
    p.add_argument("--aggregate", choices=("none", "wta", "mean"), default=None,
                   help="patch-to-image aggregation (overrides eval.aggregation)")
    p.add_argument("--magnification", choices=("40", "100", "200", "400", "none"),
                   default=None, help="overrides dataset.magnification")
    p.add_argument("--split", choices=("train", "test", "unassigned"), default=None,
                   help="overrides eval.split")

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks per op and through a full unit")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds to sweep (default 3)")
    p.add_argument("--tolerance", type=float, default=None,
                   help="relative-error bound (default 1e-4)")
    p.add_argument("--only", default=None, help="run a single check by name")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("report", parents=[common],
                       help="recompute report files from a predictions CSV")
    p.add_argument("--predictions", required=True, help="predictions.csv from eval")
    p.add_argument("--level", choices=("image", "patient"), default=None)
    p.add_argument("--aggregate", choices=("none", "wta", "mean"), default=None,
                   help="re-aggregate raw patch rows before scoring")

    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolved(args, extra=None):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if extra:
        for dotted, value in extra.items():
            if value is None:
                continue
            section, key = dotted.split(".")
            overrides.setdefault(section, {})[key] = value
    return resolve_config(args.config, overrides)


def _write_config_echo(out_dir, cfg) -> None:
    from .data import atomic_write_bytes

    payload = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(Path(out_dir) / "config.json", payload.encode("utf-8"))


def _print_counts(manifest) -> None:
    for (label, mag), count in sorted(manifest.counts().items()):
        print(f"class={label} magnification={mag} count={count}")
    print(f"records={len(manifest.records)}")


def _derived_records(records, out_root, suffix_letter, per_record_images, save_image):
    """Write derived images and return their records. `per_record_images`
    yields (record, [images]) pairs; files are named <stem>__<letter>NNN.png
    under <out_root>/images/<class>/."""
    from dataclasses import replace

    derived = []
    for rec, images in per_record_images:
        stem = Path(rec.path).stem
        class_dir = Path(out_root) / "images" / rec.class_label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            path = class_dir / f"{stem}__{suffix_letter}{i:03d}.png"
            save_image(path, img)
            derived.append(replace(rec, path=str(path)))
    return derived


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    from . import data

    cfg = _resolved(args, {"dataset.root": args.root, "dataset.id": args.dataset})
    root = cfg["dataset"]["root"]
    if not root:
        raise ConfigError("ingest needs a dataset root (--root or dataset.root)")
    manifest = data.ingest(root, cfg["dataset"]["id"])
    manifest.metadata["config"] = cfg
    manifest.save(Path(args.out) / "manifest.csv")
    _write_config_echo(args.out, cfg)
    _print_counts(manifest)
    warnings_count = len(manifest.metadata.get("warnings", []))
    print(f"warnings={warnings_count}")
    return EXIT_OK


def cmd_split(args) -> int:
    from . import data

    cfg = _resolved(args)
    manifest = data.Manifest.load(args.manifest)
    result = data.split_by_patient(manifest, train_fraction=args.train_frac, seed=cfg["seed"])
    result.metadata["config"] = cfg
    result.save(Path(args.out) / "manifest.csv")
    _write_config_echo(args.out, cfg)
    for split in ("train", "test"):
        recs = result.subset(split=split)
        patients = len({r.patient_id or r.path for r in recs})
        print(f"split={split} records={len(recs)} patients={patients}")
    return EXIT_OK


def cmd_augment(args) -> int:
    from . import data
    from .rng import fork_rng

    cfg = _resolved(args, {"pipeline.outputs_per_input": args.outputs})
    manifest = data.Manifest.load(args.manifest)
    records = manifest.subset(split=args.split) if args.split else manifest.records
    if not records:
        raise DataError("no records selected for augmentation")
    aug_cfg = augment_config_from(cfg)

    def generate():
        for rec in records:
            image = data.load_image(rec.path)
            rng = fork_rng(cfg["seed"], f"augment/{Path(rec.path).stem}")
            yield rec, data.augment(image, aug_cfg, rng)

    derived = _derived_records(records, args.out, "a", generate(), data.save_image)
    out_manifest = data.Manifest(manifest.dataset_id, derived, manifest.vocabulary,
                                 {"config": cfg, "source_manifest": str(args.manifest)})
    out_manifest.save(Path(args.out) / "manifest.csv")
    _write_config_echo(args.out, cfg)
    print(f"inputs={len(records)} outputs={len(derived)}")
    return EXIT_OK


def cmd_patch(args) -> int:
    from . import data
    from .rng import fork_rng

    mode_override = {"center": "center_patch", "random": "random_patch"}.get(args.mode)
    cfg = _resolved(args, {"pipeline.mode": mode_override, "pipeline.size": args.size,
                           "pipeline.patch_count": args.count})
    mode = cfg["pipeline"]["mode"]
    if mode not in ("center_patch", "random_patch"):
        raise ConfigError(f"patch command needs pipeline.mode center_patch or random_patch, got {mode!r}")
    size = cfg["pipeline"]["size"]
    count = cfg["pipeline"]["patch_count"]

    manifest = data.Manifest.load(args.manifest)
    records = manifest.subset(split=args.split) if args.split else manifest.records
    if not records:
        raise DataError("no records selected for patch extraction")

    def generate():
        for rec in records:
            image = data.load_image(rec.path)
            try:
                if mode == "center_patch":
                    yield rec, [data.extract_center_patch(image, size)]
                else:
                    rng = fork_rng(cfg["seed"], f"patches/{Path(rec.path).stem}")
                    yield rec, data.extract_random_patches(image, count, size, rng=rng)
            except DataError as exc:
                raise DataError(f"{rec.path}: {exc}")

    derived = _derived_records(records, args.out, "p", generate(), data.save_image)
    out_manifest = data.Manifest(manifest.dataset_id, derived, manifest.vocabulary,
                                 {"config": cfg, "source_manifest": str(args.manifest)})
    out_manifest.save(Path(args.out) / "manifest.csv")
    _write_config_echo(args.out, cfg)
    print(f"inputs={len(records)} patches={len(derived)} mode={mode} size={size}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import data, trainer
    from .model import build_model

    cfg = _resolved(args, {
        "train.initial_lr": args.lr,
        "train.trials": args.trials,
        "train.epochs_per_trial": args.epochs_per_trial,
        "train.batch_size": args.batch_size,
        "train.val_fraction": args.val_fraction,
        "train.checkpoint_every": args.checkpoint_every,
    })
    if args.restarts < 1:
        raise ConfigError("--restarts must be >= 1")
    manifest = data.Manifest.load(args.manifest)
    model_cfg = model_config_from(cfg)
    if len(manifest.vocabulary) != model_cfg.num_classes:
        raise ConfigError(
            f"manifest vocabulary {tuple(manifest.vocabulary)} has "
            f"{len(manifest.vocabulary)} classes but model.num_classes is "
            f"{model_cfg.num_classes}"
        )
    _write_config_echo(args.out, cfg)

    from dataclasses import replace

    base_cfg = train_config_from(cfg)
    finals = []
    for i in range(args.restarts):
        run_cfg = base_cfg if i == 0 else replace(base_cfg, seed=base_cfg.seed + i)
        run_out = Path(args.out) if args.restarts == 1 else Path(args.out) / f"restart{i}"
        model = build_model(model_cfg, seed=run_cfg.seed)
        history, _ = trainer.train(model, manifest, run_cfg, out_dir=run_out,
                                   config_echo={"run": cfg})
        epoch, lr, train_loss, train_acc, val_acc = history[-1]
        finals.append((run_cfg.seed, train_loss, train_acc, val_acc))
        print(f"run={i} seed={run_cfg.seed} epochs={epoch + 1} "
              f"train_loss={train_loss:.6f} train_acc={train_acc:.4f} val_acc={val_acc:.4f}")

    if args.restarts > 1:
        import numpy as np

        accs = np.asarray([f[2] for f in finals])
        rows = [("seed", "train_loss", "train_acc", "val_acc")]
        rows += [(s, repr(l), repr(a), repr(v)) for s, l, a, v in finals]
        payload = "\n".join(",".join(str(c) for c in row) for row in rows) + "\n"
        data.atomic_write_bytes(Path(args.out) / "restarts.csv", payload.encode("utf-8"))
        print(f"restarts={args.restarts} train_acc_mean={accs.mean():.4f} "
              f"train_acc_std={accs.std(ddof=1 if len(accs) > 1 else 0):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import data, evaluation
    from .checkpoint import load_checkpoint

    cfg = _resolved(args, {
        "eval.level": args.level,
        "eval.aggregation": args.aggregate,
        "eval.split": args.split,
        "dataset.magnification": args.magnification,
    })
    ckpt = load_checkpoint(args.checkpoint)
    manifest = data.Manifest.load(args.manifest)
    report, records = evaluation.evaluate(
        ckpt, manifest,
        level=cfg["eval"]["level"],
        aggregation=cfg["eval"]["aggregation"],
        magnification=cfg["dataset"]["magnification"],
        split=cfg["eval"]["split"],
        batch_size=cfg["eval"]["batch_size"],
    )
    report.metadata["config"] = cfg
    evaluation.write_report(args.out, report, records)
    _write_config_echo(args.out, cfg)
    print(f"records={report.metadata['record_count']} accuracy={report.accuracy:.4f} "
          f"sensitivity={report.sensitivity:.4f} specificity={report.specificity:.4f} "
          f"auc={report.auc:.4f} patient_rate={report.patient_rate:.4f} "
          f"image_rate={report.image_rate:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck, ops

    cfg = _resolved(args)
    tolerance = args.tolerance if args.tolerance is not None else gradcheck.DEFAULT_TOLERANCE
    known = gradcheck.op_names() + ("irru_block",)
    if args.only is not None and args.only not in known:
        raise ConfigError(f"unknown check {args.only!r}; choose from {', '.join(known)}")
    _write_config_echo(args.out, cfg)
    seeds = range(args.seeds)
    rows = []
    if args.inject_fault is not None:
        ops.set_gradient_fault(args.inject_fault)
    try:
        if args.only != "irru_block":
            only = [args.only] if args.only else None
            rows += gradcheck.run_op_suite(seeds, only=only, tolerance=tolerance)
        if args.only in (None, "irru_block"):
            for seed in seeds:
                try:
                    err = gradcheck.check_composite_unit(seed, tolerance=tolerance)
                    rows.append(("irru_block", seed, err, True))
                except GradientMismatch as exc:
                    rows.append(("irru_block", seed, exc.error, False))
    finally:
        ops.set_gradient_fault(None)

    failures = 0
    for name, seed, err, passed in rows:
        status = "pass" if passed else "FAIL"
        print(f"check={name} seed={seed} max_rel_err={err:.3e} status={status}")
        failures += not passed
    print(f"checks={len(rows)} failures={failures} tolerance={tolerance:g}")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def cmd_report(args) -> int:
    import csv as csv_mod

    from . import evaluation

    cfg = _resolved(args, {"eval.level": args.level, "eval.aggregation": args.aggregate})
    path = Path(args.predictions)
    if not path.exists():
        raise DataError(f"predictions file {path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv_mod.reader(fh)
        header = next(reader, [])
        prefix = list(evaluation.PREDICTIONS_HEADER_PREFIX)
        if header[: len(prefix)] != prefix or len(header) <= len(prefix):
            raise DataError(f"{path}: unexpected predictions header {header}")
        k = len(header) - len(prefix)
        records = [
            evaluation.PredictionRecord(
                sample=row[0], parent=row[1], patient=row[2],
                true_label=int(row[3]), predicted_label=int(row[4]),
                probabilities=[float(v) for v in row[5 : 5 + k]],
                aggregated=True,
            )
            for row in reader if row
        ]
    if not records:
        raise DataError(f"{path}: no prediction rows")

    aggregation = cfg["eval"]["aggregation"]
    if aggregation == "wta":
        records = evaluation.wta_aggregate(records)
    elif aggregation == "mean":
        records = evaluation.mean_aggregate(records)
    meta = {"level": cfg["eval"]["level"], "aggregation": aggregation,
            "source": str(path), "record_count": len(records), "config": cfg}
    report = evaluation.metrics_from_records(records, k, meta)
    report.metadata["headline_rate"] = (
        report.patient_rate if cfg["eval"]["level"] == "patient" else report.image_rate
    )
    evaluation.write_report(args.out, report, records)
    _write_config_echo(args.out, cfg)
    print(f"records={len(records)} accuracy={report.accuracy:.4f} auc={report.auc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


_COMMANDS = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "augment": cmd_augment,
    "patch": cmd_patch,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def _export_thread_cap(threads: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: ConfigError: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        _export_thread_cap(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, OSError) as exc:
        message = str(exc).replace("\n", "; ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, GradientMismatch) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""
Command line entry point

Exit codes: 0 on success, 1 for invalid input or configuration, 2 for any
other failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from ddreg import __version__
from ddreg.config import ExperimentConfig, load_experiment
from ddreg.dataset import ManifestEntry, generate_pairs, load_manifest, write_manifest
from ddreg.errors import ConfigurationError, DdregError, UsageError
from ddreg.evaluation import MetricRow, Registrar, evaluate_model, report_table
from ddreg.formats import report_formats, volume_formats
from ddreg.formats.ddvol import read_labels, read_volume
from ddreg.gradcheck import run_suite
from ddreg.logger import logger
from ddreg.nn.checkpoint import blob_digest, load_checkpoint
from ddreg.synthetic import write_synthetic_dataset
from ddreg.training import finetune_full, finetune_two_step, measure_augmentation_overhead, train
from ddreg.volume import preprocess

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2


def log_digests(paths: Sequence[Path]):
    """Log the sha256 of every written file"""
    for path in paths:
        path = Path(path)
        if path.is_dir():
            log_digests(sorted(p for p in path.rglob("*") if p.is_file()))
        elif path.is_file():
            logger.info(f"Wrote {path} (sha256 {blob_digest(path.read_bytes())})")


def _out(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def _manifest(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    manifest = args.manifest or cfg.data.manifest
    if manifest is None:
        raise ConfigurationError("No dataset manifest: pass --manifest or set data.manifest")
    return Path(manifest)


def cmd_synth(args, cfg: ExperimentConfig) -> List[Path]:
    out = _out(args, "synthetic")
    seed = args.seed if args.seed is not None else 0
    write_synthetic_dataset(out, args.kind, args.count, args.shape, args.spacing, seed)
    return [out]


def cmd_preprocess(args, cfg: ExperimentConfig) -> List[Path]:
    out = _out(args, "preprocessed")
    write = volume_formats()["ddvol"]
    entries = []
    for k, entry in enumerate(load_manifest(_manifest(args, cfg))):
        image, labels, record = preprocess(
            read_volume(entry.fixed),
            read_labels(entry.labels),
            cfg.data.target_spacing,
            cfg.data.crop_margin_mm,
            cfg.data.shape,
        )
        stem = out / f"volume_{k:04d}"
        image_path = write(image, stem.with_name(stem.name + "_image"))[0]
        labels_path = write(labels, stem.with_name(stem.name + "_labels"))[0]
        if record is not None:
            stem.with_name(stem.name + "_crop.json").write_text(json.dumps(dataclasses.asdict(record), indent=2))
        entries.append(ManifestEntry(fixed=image_path, labels=labels_path, split=entry.split))
    write_manifest(entries, out / "manifest.json")
    logger.info(f"Preprocessed {len(entries)} volumes into {out}")
    return [out]


def cmd_gen_pairs(args, cfg: ExperimentConfig) -> List[Path]:
    out = _out(args, "pairs")
    augment = cfg.augment.model_copy(update={"seed": cfg.eval.seed if args.seed is None else args.seed})
    generate_pairs(
        load_manifest(_manifest(args, cfg)),
        augment,
        out,
        args.split or cfg.eval.split,
        args.pairs_per_volume or cfg.eval.pairs_per_volume,
    )
    return [out]


def cmd_train(args, cfg: ExperimentConfig) -> List[Path]:
    out = _out(args, "run")
    train(_manifest(args, cfg), cfg.train_config(), out)
    return [out]


def cmd_finetune(args, cfg: ExperimentConfig) -> List[Path]:
    out = _out(args, "finetune")
    train_cfg = cfg.train_config()
    checkpoint = load_checkpoint(args.checkpoint, train_cfg.net)
    if args.mode == "full":
        finetune_full(checkpoint, _manifest(args, cfg), train_cfg, out)
    else:
        finetune_two_step(checkpoint, _manifest(args, cfg), train_cfg, args.step1_epochs, out)
    return [out]


def cmd_register(args, cfg: ExperimentConfig) -> List[Path]:
    out = _out(args, "registered")
    formats = volume_formats()
    if args.format not in formats:
        raise ConfigurationError(f"Unknown volume format {args.format!r}, have {sorted(formats)}")
    write = formats[args.format]
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    moving_labels = read_labels(args.moving_labels) if args.moving_labels else None
    warped, warped_labels, field, seconds = Registrar(checkpoint).register(
        read_volume(args.fixed),
        read_volume(args.moving),
        moving_labels,
    )
    logger.info(f"Registered in {seconds:.3f} s")
    written = write(warped, out / "warped") + write(field, out / "field")
    if warped_labels is not None:
        written += write(warped_labels, out / "warped_labels")
    return written


def cmd_evaluate(args, cfg: ExperimentConfig) -> List[Path]:
    out = _out(args, "evaluation")
    pairs = args.pairs or cfg.data.pairs
    if pairs is None:
        raise ConfigurationError("No pair manifest: pass --pairs or set data.pairs")
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    per_pair, row = evaluate_model(checkpoint, pairs, args.method, cfg.eval.labels)
    out.mkdir(parents=True, exist_ok=True)
    per_pair_path = out / "per_pair.csv"
    pd.DataFrame([{k: v for k, v in p.items() if k != "labels"} for p in per_pair]).to_csv(per_pair_path, index=False)
    return [row.save(out / "row.json"), per_pair_path]


def cmd_gradcheck(args, cfg: ExperimentConfig) -> List[Path]:
    results = run_suite(args.seeds, args.end_to_end_seeds)
    table = pd.DataFrame([{**dataclasses.asdict(r), "passed": r.passed} for r in results])
    summary = table.groupby("name").agg(max_error=("error", "max"), tolerance=("tolerance", "first"), passed=("passed", "all"))
    sys.stdout.write(summary.to_string() + "\n")
    written = []
    if args.out:
        path = Path(args.out) / "gradcheck.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False)
        written.append(path)
    failed = int((~table["passed"]).sum())
    if failed:
        raise RuntimeError(f"{failed} of {len(table)} gradient checks exceeded their tolerance")
    logger.info(f"All {len(table)} gradient checks passed")
    return written


def cmd_report(args, cfg: ExperimentConfig) -> List[Path]:
    formats = report_formats()
    if args.format not in formats:
        raise ConfigurationError(f"Unknown report format {args.format!r}, have {sorted(formats)}")
    table = report_table([MetricRow.load(path) for path in args.rows])
    document = formats[args.format](table)
    if not args.out:
        sys.stdout.write(document)
        return []
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document)
    return [path]


def cmd_overhead(args, cfg: ExperimentConfig) -> List[Path]:
    result = measure_augmentation_overhead(_manifest(args, cfg), cfg.train_config(), args.epochs)
    sys.stdout.write(json.dumps(result, indent=2) + "\n")
    if result["overhead_fraction"] > 0.25:
        logger.warning("Augmentation overhead above 25% of a precomputed epoch")
    if not args.out:
        return []
    path = Path(args.out) / "overhead.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2))
    return [path]


class ArgumentParser(argparse.ArgumentParser):
    """Raises `UsageError` instead of exiting on bad arguments"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="Override every seed")
    common.add_argument("--profile", choices=["desk", "paper"], default="desk", help="Default scale")
    common.add_argument("--out", help="Output directory (or file for report)")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = ArgumentParser(prog="ddreg", description="Deep deformable registration")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(handler=handler)
        return p

    p = command("synth", cmd_synth, "Write a synthetic phantom dataset")
    p.add_argument("--kind", choices=["spheres", "ellipsoids"], default="spheres")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0])

    p = command("preprocess", cmd_preprocess, "Resample, crop, resize and normalize a dataset")
    p.add_argument("--manifest", help="Dataset manifest (defaults to data.manifest)")

    p = command("gen-pairs", cmd_gen_pairs, "Materialize evaluation pairs")
    p.add_argument("--manifest", help="Dataset manifest (defaults to data.manifest)")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--pairs-per-volume", type=int)

    p = command("train", cmd_train, "Train a network from scratch")
    p.add_argument("--manifest", help="Dataset manifest (defaults to data.manifest)")

    p = command("finetune", cmd_finetune, "Transfer a checkpoint to a new dataset")
    p.add_argument("--manifest", help="Dataset manifest (defaults to data.manifest)")
    p.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    p.add_argument("--mode", choices=["full", "two-step"], default="full")
    p.add_argument("--step1-epochs", type=int, help="Frozen-encoder epochs for two-step")

    p = command("register", cmd_register, "Register one pair")
    p.add_argument("--checkpoint", help="Checkpoint directory (identity when omitted)")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--moving-labels")
    p.add_argument("--format", default="ddvol", help="Volume format of the outputs")

    p = command("evaluate", cmd_evaluate, "Score a checkpoint on a pair set")
    p.add_argument("--checkpoint", help="Checkpoint directory (identity when omitted)")
    p.add_argument("--pairs", help="Pair manifest (defaults to data.pairs)")
    p.add_argument("--method", help="Row name in reports")

    p = command("gradcheck", cmd_gradcheck, "Compare analytic and finite-difference gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--end-to-end-seeds", type=int, default=2)

    p = command("report", cmd_report, "Render evaluation rows as a table")
    p.add_argument("rows", nargs="+", help="row.json files from evaluate")
    p.add_argument("--format", default="text")

    p = command("overhead", cmd_overhead, "Time on-the-fly augmentation against precomputed pairs")
    p.add_argument("--manifest", help="Dataset manifest (defaults to data.manifest)")
    p.add_argument("--epochs", type=int, default=2)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INVALID
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_experiment(args.config, args.profile, args.seed)
        log_digests(args.handler(args, cfg))
    except (DdregError, ValidationError) as e:
        logger.error(f"{args.command}: {e}", exc_info=True)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INVALID
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

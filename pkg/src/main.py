#!/usr/bin/env python3
import argparse
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

from monitoring.metrics import TrainingMetrics
from network.unet import load_checkpoint
from pipelines.dataset import ISOTROPIC_1MM, CaseStore, load_cases, split_cases
from pipelines.inference import GroundTruthOracle, OraclePredictor, evaluate, segment_volume
from pipelines.preprocess import NormStats, resample_nearest
from pipelines.reporting import (
    HISTORY_COLUMNS,
    format_tables,
    read_history_csv,
    read_metrics_csv,
    write_history_csv,
    write_metrics_csv,
    write_overlays,
    write_report,
)
from pipelines.run_config import RunConfig, load_config, save_config
from pipelines.training import train
from utils.errors import DataError, SegmentationError, UsageError
from utils.logger import configure_logging, setup_logger
from volumes.phantom import MANIFEST_NAME, generate_dataset, read_manifest
from volumes.volgrid import LabelMask, Volume, load_svol, save_svol

logger = setup_logger(__name__)

CHECKPOINT_NAME = "best.spckpt"
HISTORY_NAME = "history.csv"
NORM_STATS_NAME = "norm_stats.json"
METRICS_PROM_NAME = "metrics.prom"
RUN_CONFIG_NAME = "run_config.yaml"
METRICS_CSV_NAME = "metrics.csv"
TABLES_NAME = "tables.txt"


class SegmentationRunner:
    """Executes one CLI subcommand against a validated run config."""

    def __init__(self, config: RunConfig, metrics: Optional[TrainingMetrics] = None):
        self.config = config
        self.metrics = metrics or TrainingMetrics()

    def _store(self, data_dir: Path) -> CaseStore:
        manifest = read_manifest(data_dir / MANIFEST_NAME)
        store = CaseStore(load_cases(manifest))
        split_cfg = self.config.split
        split = split_cases(
            store.case_ids(),
            seed=split_cfg.seed,
            fold=split_cfg.fold,
            n_folds=split_cfg.n_folds,
            test_fraction=split_cfg.test_fraction,
        )
        return store.with_split(split)

    def run_phantom(self, out_dir: Path) -> Path:
        manifest = generate_dataset(self.config.phantom, self.config.n_cases, self.config.phantom.seed, out_dir)
        manifest_path = out_dir / MANIFEST_NAME
        print(manifest_path)
        logger.info("phantom command finished", cases=len(manifest.entries))
        return manifest_path

    def run_train(self, data_dir: Path, out_dir: Path) -> Dict[str, Path]:
        store = self._store(data_dir)
        for line in store.split.audit_lines():
            print(line)

        result = train(store, self.config.train, self.config.model, self.metrics)

        out_dir.mkdir(parents=True, exist_ok=True)
        written = {
            "checkpoint": out_dir / CHECKPOINT_NAME,
            "history": write_history_csv(result.history, out_dir / HISTORY_NAME),
            "norm_stats": result.norm_stats.save(out_dir / NORM_STATS_NAME),
            "metrics": self.metrics.write_textfile(out_dir / METRICS_PROM_NAME),
            "config": save_config(self.config, out_dir / RUN_CONFIG_NAME),
        }
        written["checkpoint"].write_bytes(result.checkpoint)
        logger.info("train command finished", out_dir=str(out_dir), checkpoints=len(result.history.checkpoints))
        return written

    def run_infer(
        self,
        ct_path: Path,
        out_path: Path,
        checkpoint: Optional[Path] = None,
        norm_stats: Optional[Path] = None,
        oracle_label: Optional[Path] = None,
        overlay_dir: Optional[Path] = None,
    ) -> LabelMask:
        ct = load_svol(ct_path)
        if not isinstance(ct, Volume):
            raise DataError(f"{ct_path} holds a label mask, not a CT volume")

        if oracle_label is not None:
            label = load_svol(oracle_label)
            if not isinstance(label, LabelMask):
                raise DataError(f"{oracle_label} is not a label mask")
            predictor = OraclePredictor(resample_nearest(label, ISOTROPIC_1MM))
            # the oracle ignores intensities
            stats = NormStats.load(norm_stats) if norm_stats is not None else NormStats(0.0, 1.0)
        else:
            if checkpoint is None:
                raise UsageError("infer needs --checkpoint unless --oracle-label is given")
            predictor, _ = load_checkpoint(checkpoint.read_bytes())
            stats = NormStats.load(norm_stats or checkpoint.parent / NORM_STATS_NAME)

        start = time.perf_counter()
        prediction = segment_volume(predictor, ct, stats, self.config.train.spec)
        seconds = time.perf_counter() - start
        self.metrics.record_inference_time(seconds)

        save_svol(prediction, out_path)
        print(f"{out_path}\t{seconds:.3f}s")
        if overlay_dir is not None:
            write_overlays(resample_nearest(ct, ISOTROPIC_1MM), prediction, overlay_dir)
        logger.info("infer command finished", output=str(out_path), seconds=round(seconds, 3), shape=prediction.shape)
        return prediction

    def run_evaluate(
        self,
        out_dir: Path,
        data_dir: Optional[Path] = None,
        checkpoint: Optional[Path] = None,
        norm_stats: Optional[Path] = None,
        role: str = "test",
        oracle: bool = False,
        from_csv: Optional[Path] = None,
    ) -> str:
        if from_csv is not None:
            per_case = read_metrics_csv(from_csv)
        else:
            store = self._store(data_dir)
            cases = store.role_cases(role)
            if oracle:
                predictor, stats = GroundTruthOracle(), NormStats(0.0, 1.0)
            else:
                if checkpoint is None:
                    raise UsageError("evaluate needs --checkpoint, --oracle or --from-csv")
                predictor, _ = load_checkpoint(checkpoint.read_bytes())
                stats = NormStats.load(norm_stats or checkpoint.parent / NORM_STATS_NAME)
            report = evaluate(predictor, cases, stats, self.config.train.spec, self.metrics)
            per_case = report.per_case
            write_metrics_csv(per_case, out_dir / METRICS_CSV_NAME)

        tables = format_tables(per_case)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / TABLES_NAME).write_text(tables)
        print(tables, end="")
        return tables

    def run_report(self, input_csv: Path, out_dir: Path) -> Dict[str, Path]:
        try:
            header = input_csv.read_text().splitlines()[:1]
        except OSError as e:
            raise DataError(f"Cannot read {input_csv}: {e}") from e
        if header and header[0].strip() == ",".join(HISTORY_COLUMNS):
            return write_report(read_history_csv(input_csv), out_dir)
        tables = format_tables(read_metrics_csv(input_csv))
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / TABLES_NAME
        path.write_text(tables)
        print(tables, end="")
        return {"tables": path}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="CT bone/nerve segmentation pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--seed", type=int, help="Seed override")
    common.add_argument("--fold", type=int, help="Validation fold override")
    common.add_argument("--out", type=Path, help="Output directory")

    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", parents=[common], help="Generate a synthetic phantom dataset")
    phantom.add_argument("--cases", type=int, help="Number of phantom cases")

    train_p = sub.add_parser("train", parents=[common], help="Train on a phantom dataset")
    train_p.add_argument("--data", type=Path, help="Dataset directory holding manifest.txt")

    infer = sub.add_parser("infer", parents=[common], help="Segment one CT volume")
    infer.add_argument("ct", type=Path, help="CT .svol file")
    infer.add_argument("--checkpoint", type=Path, help="Model checkpoint")
    infer.add_argument("--norm-stats", type=Path, help="Normalization sidecar (default: next to checkpoint)")
    infer.add_argument("--oracle-label", type=Path, help="Predict this label mask instead of running a model")
    infer.add_argument("--overlay-dir", type=Path, help="Write per-slice PNG overlays here")

    evaluate_p = sub.add_parser("evaluate", parents=[common], help="Per-case metrics and result tables")
    evaluate_p.add_argument("--data", type=Path, help="Dataset directory holding manifest.txt")
    evaluate_p.add_argument("--checkpoint", type=Path, help="Model checkpoint")
    evaluate_p.add_argument("--norm-stats", type=Path, help="Normalization sidecar (default: next to checkpoint)")
    evaluate_p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    evaluate_p.add_argument("--oracle", action="store_true", help="Score ground truth against itself")
    evaluate_p.add_argument("--from-csv", type=Path, help="Re-render tables from an existing metrics CSV")

    report = sub.add_parser("report", parents=[common], help="Curves and plots from history or metrics CSV")
    report.add_argument("input", type=Path, help="history.csv or metrics.csv")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {"train.fold": args.fold}
    if args.command == "phantom":
        overrides["phantom.seed"] = args.seed
        overrides["phantom.cases"] = args.cases
        overrides["paths.data_dir"] = str(args.out) if args.out else None
    else:
        overrides["train.seed"] = args.seed
        overrides["paths.out_dir"] = str(args.out) if args.out else None
    if getattr(args, "data", None) is not None:
        overrides["paths.data_dir"] = str(args.data)
    return overrides


def run(args: argparse.Namespace) -> None:
    config = load_config(args.config, _overrides(args), check_split=args.command == "train")
    configure_logging(
        level=config.logging.level,
        log_file=config.logging.file,
        json_format=config.logging.format == "json",
    )
    runner = SegmentationRunner(config)
    data_dir, out_dir = Path(config.paths.data_dir), Path(config.paths.out_dir)

    if args.command == "phantom":
        if args.out is None:
            raise UsageError("phantom needs --out")
        runner.run_phantom(args.out)
    elif args.command == "train":
        runner.run_train(data_dir, out_dir)
    elif args.command == "infer":
        if args.out is None:
            raise UsageError("infer needs --out for the predicted mask")
        runner.run_infer(
            args.ct,
            args.out,
            checkpoint=args.checkpoint,
            norm_stats=args.norm_stats,
            oracle_label=args.oracle_label,
            overlay_dir=args.overlay_dir,
        )
    elif args.command == "evaluate":
        runner.run_evaluate(
            out_dir,
            data_dir=data_dir,
            checkpoint=args.checkpoint,
            norm_stats=args.norm_stats,
            role=args.split,
            oracle=args.oracle,
            from_csv=args.from_csv,
        )
    elif args.command == "report":
        runner.run_report(args.input, out_dir)


def main(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 ok, 2 usage/config, 3 I/O or data, 4 divergence."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        run(args)
    except SegmentationError as e:
        logger.error("command failed", command=args.command, error=str(e), exit_code=e.exit_code)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error("command failed", command=args.command, error=str(e), exit_code=3)
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

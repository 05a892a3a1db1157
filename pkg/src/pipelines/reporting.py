"""
Report tooling: metrics and history CSVs, the per-class result tables,
training curves and prediction overlays.
"""
import csv
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.image as mpimg
import matplotlib.pyplot as plt
import numpy as np

from network.objective import METRIC_NAMES, REPORTED_CLASSES, MetricResult, aggregate_mean
from pipelines.training import CheckpointEvent, HistoryRow, TrainHistory, ValidationEvent
from utils.errors import DataError, UsageError
from utils.logger import setup_logger
from volumes.volgrid import BONE, CLASS_NAMES, NERVE, LabelMask, Volume

logger = setup_logger(__name__)

METRICS_COLUMNS = ("case_id", "class", "pixel_accuracy", "iou", "dice")
HISTORY_COLUMNS = ("iteration", "epoch", "loss", "val_dice_bone", "val_dice_nerve", "checkpointed")
TABLE_TITLES = {"pixel_accuracy": "Pixel accuracy (%)", "iou": "IoU (%)", "dice": "Dice score (%)"}
MAX_CURVE_POINTS = 500

# RGB per class for overlays; background stays transparent
_OVERLAY_COLORS = {BONE: (1.0, 0.85, 0.2), NERVE: (0.9, 0.1, 0.1)}

PathLike = Union[str, Path]


# -- metrics CSV --------------------------------------------------------------

def write_metrics_csv(per_case: Sequence[MetricResult], path: PathLike) -> Path:
    """One row per (case, class); values are fractions in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for result in per_case:
            for class_name, values in result.values.items():
                writer.writerow([result.case_id, class_name] + [repr(float(values[m])) for m in METRIC_NAMES])
    return path


def read_metrics_csv(path: PathLike) -> List[MetricResult]:
    """Parse a metrics CSV back into per-case results, in first-seen case order."""
    path = Path(path)
    values: Dict[str, Dict[str, Dict[str, float]]] = {}
    try:
        with path.open(newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != METRICS_COLUMNS:
                raise DataError(f"{path} line 1: expected header {','.join(METRICS_COLUMNS)}")
            for lineno, row in enumerate(reader, start=2):
                if not row or not any(cell.strip() for cell in row):
                    continue
                if len(row) != len(METRICS_COLUMNS):
                    raise DataError(f"{path} line {lineno}: expected {len(METRICS_COLUMNS)} fields, got {len(row)}")
                case_id, class_name = row[0].strip(), row[1].strip()
                if class_name not in CLASS_NAMES:
                    raise DataError(f"{path} line {lineno}: unknown class {class_name!r}")
                try:
                    numbers = [float(cell) for cell in row[2:]]
                except ValueError as e:
                    raise DataError(f"{path} line {lineno}: {e}") from e
                if not all(0.0 <= v <= 1.0 for v in numbers):
                    raise DataError(f"{path} line {lineno}: metric values must be fractions in [0, 1]")
                values.setdefault(case_id, {})[class_name] = dict(zip(METRIC_NAMES, numbers))
    except OSError as e:
        raise DataError(f"Cannot read metrics CSV {path}: {e}") from e
    if not values:
        raise DataError(f"{path}: no metric rows")
    classes = {tuple(sorted(v)) for v in values.values()}
    if len(classes) != 1:
        raise DataError(f"{path}: every case must list the same classes")
    return [MetricResult(case_id=case_id, values=v) for case_id, v in values.items()]


def format_tables(per_case: Sequence[MetricResult]) -> str:
    """
    Render the pixel accuracy, IoU and Dice tables.

    One row per reported class, one column per case plus a mean column;
    values in percent with one decimal.
    """
    if not per_case:
        raise UsageError("format_tables needs at least one case")
    mean = aggregate_mean(per_case)
    columns = [r.case_id for r in per_case] + ["mean"]
    class_names = [CLASS_NAMES[c] for c in REPORTED_CLASSES if CLASS_NAMES[c] in mean.values]
    label_width = max(len(name) for name in class_names + ["class"])
    widths = [max(len(col), 5) for col in columns]

    blocks = []
    for metric in METRIC_NAMES:
        lines = [TABLE_TITLES[metric]]
        lines.append("  ".join(["class".ljust(label_width)] + [col.rjust(w) for col, w in zip(columns, widths)]))
        for name in class_names:
            cells = [f"{100.0 * r.get(name, metric):.1f}" for r in per_case] + [f"{100.0 * mean.get(name, metric):.1f}"]
            lines.append("  ".join([name.ljust(label_width)] + [c.rjust(w) for c, w in zip(cells, widths)]))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


# -- history CSV --------------------------------------------------------------

def _optional(value) -> str:
    return "" if value is None else repr(float(value))


def write_history_csv(history: TrainHistory, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for row in history.rows:
            writer.writerow([
                row.iteration,
                row.epoch,
                repr(float(row.loss)),
                _optional(row.val_dice_bone),
                _optional(row.val_dice_nerve),
                int(row.checkpointed),
            ])
    return path


def read_history_csv(path: PathLike) -> TrainHistory:
    """
    Rebuild a TrainHistory from its CSV.

    Validation events come from rows carrying Dice values, checkpoint events
    from rows flagged ``checkpointed``. Case ids of validation events are not
    part of the CSV and come back empty.
    """
    path = Path(path)
    history = TrainHistory()
    try:
        with path.open(newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != HISTORY_COLUMNS:
                raise DataError(f"{path} line 1: expected header {','.join(HISTORY_COLUMNS)}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(HISTORY_COLUMNS):
                    raise DataError(f"{path} line {lineno}: expected {len(HISTORY_COLUMNS)} fields, got {len(row)}")
                try:
                    iteration, epoch = int(row[0]), int(row[1])
                    loss = float(row[2])
                    bone = float(row[3]) if row[3].strip() else None
                    nerve = float(row[4]) if row[4].strip() else None
                    checkpointed = bool(int(row[5]))
                except ValueError as e:
                    raise DataError(f"{path} line {lineno}: {e}") from e
                if (bone is None) != (nerve is None):
                    raise DataError(f"{path} line {lineno}: both validation Dice columns or neither")
                if checkpointed and bone is None:
                    raise DataError(f"{path} line {lineno}: checkpoint flagged without a validation result")
                if history.rows and iteration <= history.rows[-1].iteration:
                    raise DataError(f"{path} line {lineno}: iterations must increase")
                history.rows.append(HistoryRow(iteration, epoch, loss, bone, nerve, checkpointed))
                if bone is not None:
                    event = ValidationEvent(iteration, epoch, (), bone, nerve)
                    history.validations.append(event)
                    if checkpointed:
                        try:
                            history.add_checkpoint(CheckpointEvent(iteration, event.mean_dice))
                        except UsageError as e:
                            raise DataError(f"{path} line {lineno}: {e}") from e
    except OSError as e:
        raise DataError(f"Cannot read history CSV {path}: {e}") from e
    if not history.rows:
        raise DataError(f"{path}: history is empty")
    return history


# -- curves -------------------------------------------------------------------

def loss_curve(history: TrainHistory, max_points: int = MAX_CURVE_POINTS) -> List[Tuple[int, float]]:
    """(last iteration, mean loss) per block, at most ``max_points`` blocks."""
    if not history.rows:
        raise UsageError("Empty history")
    if max_points < 1:
        raise UsageError(f"max_points must be >= 1, got {max_points}")
    iterations = np.array([r.iteration for r in history.rows])
    losses = np.array(history.losses(), dtype=np.float64)
    n_blocks = min(max_points, len(losses))
    return [
        (int(it[-1]), float(ls.mean()))
        for it, ls in zip(np.array_split(iterations, n_blocks), np.array_split(losses, n_blocks))
    ]


def dice_curve(history: TrainHistory) -> List[Tuple[int, float, float, float]]:
    """(iteration, bone, nerve, mean) for every validation event."""
    return [(v.iteration, v.dice_bone, v.dice_nerve, v.mean_dice) for v in history.validations]


def best_dice_envelope(history: TrainHistory) -> List[Tuple[int, float]]:
    """Validation events that strictly improved the running best mean Dice."""
    envelope, best = [], -np.inf
    for event in history.validations:
        if event.mean_dice > best:
            best = event.mean_dice
            envelope.append((event.iteration, best))
    return envelope


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_report(history: TrainHistory, out_dir: PathLike) -> Dict[str, Path]:
    """Curve CSVs plus loss and Dice PNGs under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    losses = loss_curve(history)
    dices = dice_curve(history)
    envelope = best_dice_envelope(history)

    written = {
        "loss_curve": _write_rows(out_dir / "loss_curve.csv", ("iteration", "loss"), losses),
        "dice_curve": _write_rows(
            out_dir / "dice_curve.csv", ("iteration", "dice_bone", "dice_nerve", "mean_dice"), dices
        ),
        "best_dice": _write_rows(out_dir / "best_dice.csv", ("iteration", "best_mean_dice"), envelope),
    }

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([p[0] for p in losses], [p[1] for p in losses], color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curve.png", dpi=100)
    plt.close(fig)
    written["loss_plot"] = out_dir / "loss_curve.png"

    fig, ax = plt.subplots(figsize=(7, 4))
    if dices:
        steps = np.arange(1, len(dices) + 1)
        ax.plot(steps, [d[1] for d in dices], label="bone", color="tab:orange")
        ax.plot(steps, [d[2] for d in dices], label="nerve", color="tab:red")
        ax.plot(steps, [d[3] for d in dices], label="mean", color="tab:gray", linestyle="--")
        ax.legend(loc="lower right")
    ax.set_xlabel("validation step")
    ax.set_ylabel("Dice")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("Validation Dice")
    fig.tight_layout()
    fig.savefig(out_dir / "dice_curve.png", dpi=100)
    plt.close(fig)
    written["dice_plot"] = out_dir / "dice_curve.png"

    logger.info("report written", out_dir=str(out_dir), loss_points=len(losses), validation_points=len(dices))
    return written


# -- overlays -----------------------------------------------------------------

def _window(slice_hu: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(slice_hu, [1.0, 99.0])
    if hi <= lo:
        return np.zeros_like(slice_hu, dtype=np.float64)
    return np.clip((slice_hu - lo) / (hi - lo), 0.0, 1.0)


def write_overlays(ct: Volume, prediction: LabelMask, out_dir: PathLike, alpha: float = 0.45) -> List[Path]:
    """One PNG per axial slice with the predicted classes blended over the CT."""
    if ct.shape != prediction.shape:
        raise UsageError(f"CT {ct.shape} and prediction {prediction.shape} differ in shape")
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ct_data = ct.data.astype(np.float64)
    written = []
    for d in range(ct.shape[0]):
        gray = _window(ct_data[d])
        rgb = np.repeat(gray[..., None], 3, axis=-1)
        labels = prediction.data[d]
        for code, color in _OVERLAY_COLORS.items():
            hit = labels == code
            rgb[hit] = (1.0 - alpha) * rgb[hit] + alpha * np.asarray(color)
        path = out_dir / f"slice_{d:04d}.png"
        mpimg.imsave(path, rgb)
        written.append(path)
    logger.debug("overlays written", out_dir=str(out_dir), slices=len(written))
    return written

"""
Weighted softmax cross-entropy with its two-phase class-weight schedule, and
the per-class evaluation metrics (pixel accuracy, IoU, Dice).
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from utils.errors import ContentError, UsageError
from volumes.volgrid import BONE, CLASS_NAMES, NERVE, NUM_CLASSES, LabelMask

REPORTED_CLASSES = (BONE, NERVE)
METRIC_NAMES = ("pixel_accuracy", "iou", "dice")


@dataclass(frozen=True)
class ClassWeights:
    w_background: float
    w_bone: float
    w_nerve: float

    def __post_init__(self):
        if not all(np.isfinite(w) and w > 0 for w in self.as_array()):
            raise UsageError(f"Class weights must be positive, got {tuple(self.as_array())}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_background, self.w_bone, self.w_nerve], dtype=np.float64)


@dataclass(frozen=True)
class WeightSchedule:
    early: ClassWeights = ClassWeights(1.0, 1.0, 20.0)
    late: ClassWeights = ClassWeights(1.0, 1.0, 2.0)
    switch_epoch: int = 40
    total_epochs: int = 100

    def __post_init__(self):
        if not 0 < self.switch_epoch < self.total_epochs:
            raise UsageError(
                f"Schedule needs 0 < switch_epoch < total_epochs, got {self.switch_epoch} / {self.total_epochs}"
            )

    def scaled(self, total_epochs: int) -> "WeightSchedule":
        """Same weights, switch moved to the same fraction of a run of ``total_epochs``."""
        if total_epochs < 2:
            raise UsageError(f"A two-phase schedule needs at least 2 epochs, got {total_epochs}")
        switch = int(round(total_epochs * self.switch_epoch / self.total_epochs))
        switch = min(max(switch, 1), total_epochs - 1)
        return replace(self, switch_epoch=switch, total_epochs=total_epochs)


def schedule_weights(epoch: int, schedule: WeightSchedule) -> ClassWeights:
    if not 0 <= epoch < schedule.total_epochs:
        raise UsageError(f"Epoch {epoch} outside [0, {schedule.total_epochs})")
    return schedule.early if epoch < schedule.switch_epoch else schedule.late


def _labels_array(gt: Union[np.ndarray, LabelMask, Sequence[LabelMask]]) -> np.ndarray:
    if isinstance(gt, LabelMask):
        return gt.data[None]
    if isinstance(gt, (list, tuple)):
        return np.stack([m.data for m in gt])
    return np.asarray(gt)


def weighted_ce_loss(
    logits: np.ndarray,
    gt: Union[np.ndarray, LabelMask, Sequence[LabelMask]],
    weights: ClassWeights,
    reduction: str = "sum",
) -> Tuple[float, np.ndarray]:
    """
    L = -sum_x w(x) * log softmax(a(x))_l(x), w(x) the weight of x's true class.

    Returns the loss and its gradient with respect to ``logits``
    (N, 3, D, H, W). ``reduction="mean"`` divides both by the voxel count.
    """
    labels = _labels_array(gt)
    if logits.ndim != 5 or logits.shape[1] != NUM_CLASSES:
        raise UsageError(f"Logits must be (N, {NUM_CLASSES}, D, H, W), got {logits.shape}")
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise UsageError(f"Labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise ContentError("Ground truth contains a class code outside {0,1,2}")
    if reduction not in ("sum", "mean"):
        raise UsageError(f"Unknown loss reduction {reduction!r}")

    a = logits.astype(np.float64)
    labels = labels.astype(np.int64)
    shifted = a - a.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z

    w = weights.as_array()[labels]
    true_log_p = np.take_along_axis(log_p, labels[:, None], axis=1)[:, 0]
    loss = -float(np.sum(w * true_log_p))

    grad = np.exp(log_p)
    np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1.0, axis=1)
    grad *= w[:, None]

    if reduction == "mean":
        n = labels.size
        loss /= n
        grad /= n
    return loss, grad.astype(logits.dtype)


# -- metrics ----------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class TP / FP / FN (index = class code) and total voxel count."""
    tp: Tuple[int, ...]
    fp: Tuple[int, ...]
    fn: Tuple[int, ...]
    total: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=tuple(a + b for a, b in zip(self.tp, other.tp)),
            fp=tuple(a + b for a, b in zip(self.fp, other.fp)),
            fn=tuple(a + b for a, b in zip(self.fn, other.fn)),
            total=self.total + other.total,
        )


def confusion_counts(pred: LabelMask, gt: LabelMask) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise UsageError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    joint = gt.data.astype(np.int64).ravel() * NUM_CLASSES + pred.data.astype(np.int64).ravel()
    matrix = np.bincount(joint, minlength=NUM_CLASSES * NUM_CLASSES).reshape(NUM_CLASSES, NUM_CLASSES)
    tp = np.diag(matrix)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    return ConfusionCounts(
        tp=tuple(int(v) for v in tp),
        fp=tuple(int(v) for v in fp),
        fn=tuple(int(v) for v in fn),
        total=int(gt.data.size),
    )


def pixel_accuracy(counts: ConfusionCounts, c: int) -> float:
    """Class recall TP / (TP + FN); 1 or 0 when the class is absent from gt."""
    tp, fp, fn = counts.tp[c], counts.fp[c], counts.fn[c]
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def iou(counts: ConfusionCounts, c: int) -> float:
    tp, fp, fn = counts.tp[c], counts.fp[c], counts.fn[c]
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def dice(counts: ConfusionCounts, c: int) -> float:
    tp, fp, fn = counts.tp[c], counts.fp[c], counts.fn[c]
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass
class MetricResult:
    """Per-class metrics for one case (or the mean over cases)."""
    case_id: str
    values: Dict[str, Dict[str, float]]
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        for cls_name, metrics in self.values.items():
            for name, value in metrics.items():
                if not 0.0 <= value <= 1.0:
                    raise UsageError(f"{name} for {cls_name} must lie in [0, 1], got {value}")

    def get(self, class_name: str, metric: str) -> float:
        return self.values[class_name][metric]

    def mean_dice(self) -> float:
        return float(np.mean([self.values[CLASS_NAMES[c]]["dice"] for c in REPORTED_CLASSES]))


def metric_result(case_id: str, counts: ConfusionCounts) -> MetricResult:
    values, backing = {}, {}
    for c in REPORTED_CLASSES:
        name = CLASS_NAMES[c]
        values[name] = {
            "pixel_accuracy": pixel_accuracy(counts, c),
            "iou": iou(counts, c),
            "dice": dice(counts, c),
        }
        backing[name] = {"tp": counts.tp[c], "fp": counts.fp[c], "fn": counts.fn[c], "total": counts.total}
    return MetricResult(case_id=case_id, values=values, counts=backing)


def aggregate_mean(per_case: Sequence[MetricResult], case_id: str = "mean") -> MetricResult:
    """Unweighted mean of every metric of every class over the cases."""
    if not per_case:
        raise UsageError("aggregate_mean needs at least one case")
    class_names = list(per_case[0].values)
    values = {
        cls: {m: float(np.mean([r.values[cls][m] for r in per_case])) for m in per_case[0].values[cls]}
        for cls in class_names
    }
    counts = {}
    if all(r.counts for r in per_case):
        counts = {
            cls: {k: int(sum(r.counts[cls][k] for r in per_case)) for k in per_case[0].counts[cls]}
            for cls in class_names
        }
    return MetricResult(case_id=case_id, values=values, counts=counts)

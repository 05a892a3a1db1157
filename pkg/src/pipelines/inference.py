"""
Sliding-window inference, probability fusion and test-set evaluation.
"""
import time
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence

import numpy as np

from monitoring.metrics import TrainingMetrics
from network.objective import MetricResult, aggregate_mean, confusion_counts, metric_result
from pipelines.dataset import ISOTROPIC_1MM, Case
from pipelines.preprocess import NormStats, PatchSpec, extract_patch, normalize, resample_nearest, window_origins
from utils.errors import UsageError
from utils.logger import setup_logger
from volumes.volgrid import NUM_CLASSES, LabelMask, ProbMask, Shape3, Volume

logger = setup_logger(__name__)


class Predictor(Protocol):
    def predict(self, patch: np.ndarray, origin: Shape3) -> np.ndarray:
        """Channel-last probabilities (pd, ph, pw, 3) for one patch at ``origin``."""


class OraclePredictor:
    """One-hot of a known label mask; a perfect predictor for stub runs."""

    def __init__(self, label: LabelMask):
        self.label = label

    def predict(self, patch: np.ndarray, origin: Shape3) -> np.ndarray:
        window = extract_patch(self.label, origin, patch.shape).data
        return np.eye(NUM_CLASSES, dtype=np.float32)[window]


class GroundTruthOracle:
    """Binds an OraclePredictor to each evaluated case's own labels."""

    def for_case(self, case: Case) -> OraclePredictor:
        if case.label is None:
            raise UsageError(f"Case {case.case_id} has no ground truth for the oracle")
        return OraclePredictor(case.label)


class ConstantPredictor:
    """Emits the same probability vector everywhere."""

    def __init__(self, probabilities: Sequence[float] = (1.0, 0.0, 0.0)):
        self.probabilities = np.asarray(probabilities, dtype=np.float32)

    def predict(self, patch: np.ndarray, origin: Shape3) -> np.ndarray:
        return np.broadcast_to(self.probabilities, tuple(patch.shape) + (NUM_CLASSES,)).copy()


def sliding_window_infer(
    predictor: Predictor,
    volume: Volume,
    spec: PatchSpec,
    origins: Optional[Sequence[Shape3]] = None,
) -> ProbMask:
    """
    Accumulate window outputs into Y: Y[L_i] += y_i.

    Windows are taken from the clamped stride grid unless ``origins`` is
    given; padded parts of windows that overhang a small volume are cropped
    before accumulation.
    """
    if origins is None:
        origins = window_origins(volume.shape, spec)
    accum = np.zeros(volume.shape + (NUM_CLASSES,), dtype=np.float64)
    for origin in origins:
        patch = extract_patch(volume, origin, spec.patch)
        y = np.asarray(predictor.predict(patch.data, origin))
        if y.shape != tuple(spec.patch) + (NUM_CLASSES,):
            raise UsageError(f"Predictor returned shape {y.shape}, expected {tuple(spec.patch) + (NUM_CLASSES,)}")
        valid = tuple(min(p, n - o) for o, p, n in zip(origin, spec.patch, volume.shape))
        dst = tuple(slice(o, o + v) for o, v in zip(origin, valid))
        accum[dst] += y[tuple(slice(0, v) for v in valid)]
    return ProbMask(accum, volume.spacing)


def combine(scores: ProbMask) -> LabelMask:
    """Per-voxel argmax over channels; ties go to the lowest class index."""
    return LabelMask(np.argmax(scores.data, axis=-1).astype(np.uint8), scores.spacing)


def segment_volume(predictor: Predictor, ct: Volume, stats: NormStats, spec: PatchSpec) -> LabelMask:
    """Resample to 1 mm, normalize, infer and combine."""
    prepared = normalize(resample_nearest(ct, ISOTROPIC_1MM), stats)
    return combine(sliding_window_infer(predictor, prepared, spec))


@dataclass
class EvaluationReport:
    per_case: List[MetricResult]
    mean: MetricResult
    seconds: List[float] = field(default_factory=list)


def evaluate(
    predictor: Predictor,
    cases: Sequence[Case],
    stats: NormStats,
    spec: PatchSpec,
    metrics: Optional[TrainingMetrics] = None,
) -> EvaluationReport:
    """
    Per-case metrics against ground truth resampled the same way as the CT.

    A predictor with a ``for_case(case)`` method (``GroundTruthOracle``) is
    re-bound to every case before its windows are run.
    """
    if not cases:
        raise UsageError("evaluate needs at least one case")
    per_case, seconds = [], []
    for case in cases:
        if case.label is None:
            raise UsageError(f"Case {case.case_id} has no ground truth")
        prepared = case.resampled(ISOTROPIC_1MM)
        bound = predictor.for_case(prepared) if hasattr(predictor, "for_case") else predictor
        start = time.perf_counter()
        pred = combine(sliding_window_infer(bound, normalize(prepared.ct, stats), spec))
        elapsed = time.perf_counter() - start
        if metrics is not None:
            metrics.record_inference_time(elapsed)
        result = metric_result(case.case_id, confusion_counts(pred, prepared.label))
        per_case.append(result)
        seconds.append(elapsed)
        logger.info(
            "case evaluated",
            case_id=case.case_id,
            seconds=round(elapsed, 3),
            dice_bone=round(result.get("bone", "dice"), 4),
            dice_nerve=round(result.get("nerve", "dice"), 4),
        )
    return EvaluationReport(per_case=per_case, mean=aggregate_mean(per_case), seconds=seconds)

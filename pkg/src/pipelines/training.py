"""
Minibatch SGD training with the scheduled class weights and
best-validation-Dice checkpointing.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from monitoring.metrics import TrainingMetrics
from network.neural import sgd_step
from network.objective import (
    WeightSchedule,
    confusion_counts,
    dice,
    schedule_weights,
    weighted_ce_loss,
)
from network.unet import Model, ModelConfig, build_unet, load_checkpoint, save_checkpoint
from pipelines.dataset import ISOTROPIC_1MM, Case, CaseStore
from pipelines.inference import combine, sliding_window_infer
from pipelines.preprocess import (
    AugmentParams,
    NormStats,
    PatchSpec,
    augment,
    compute_norm_stats,
    extract_patch,
    normalize,
)
from utils.errors import DivergenceError, UsageError
from utils.logger import setup_logger
from volumes.volgrid import BONE, CLASS_NAMES, NERVE, Shape3, Volume

logger = setup_logger(__name__)

# rng stream ids mixed into the per-iteration seed
_VALIDATION_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 4
    patch: Shape3 = (32, 64, 64)
    stride: Shape3 = (20, 40, 40)
    total_epochs: int = 100
    iterations_per_epoch: int = 100
    validation_interval: int = 100
    validation_cases: int = 6
    schedule: WeightSchedule = WeightSchedule()
    seed: int = 0
    loss_reduction: str = "sum"
    augment_validation: bool = False
    augment: AugmentParams = AugmentParams()

    def __post_init__(self):
        positive = ("lr", "batch_size", "total_epochs", "iterations_per_epoch", "validation_interval", "validation_cases")
        for name in positive:
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise UsageError(f"{name} must be positive, got {value}")
        if self.schedule.total_epochs != self.total_epochs:
            raise UsageError(
                f"Weight schedule spans {self.schedule.total_epochs} epochs, training runs {self.total_epochs}"
            )
        if self.loss_reduction not in ("sum", "mean"):
            raise UsageError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")
        PatchSpec(tuple(self.patch), tuple(self.stride))

    @property
    def spec(self) -> PatchSpec:
        return PatchSpec(tuple(self.patch), tuple(self.stride))

    @property
    def total_iterations(self) -> int:
        return self.total_epochs * self.iterations_per_epoch


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    epoch: int
    loss: float
    val_dice_bone: Optional[float] = None
    val_dice_nerve: Optional[float] = None
    checkpointed: bool = False


@dataclass(frozen=True)
class ValidationEvent:
    iteration: int
    epoch: int
    case_ids: Tuple[str, ...]
    dice_bone: float
    dice_nerve: float

    @property
    def mean_dice(self) -> float:
        return (self.dice_bone + self.dice_nerve) / 2.0


@dataclass(frozen=True)
class CheckpointEvent:
    iteration: int
    best_dice: float


@dataclass
class TrainHistory:
    rows: List[HistoryRow] = field(default_factory=list)
    validations: List[ValidationEvent] = field(default_factory=list)
    checkpoints: List[CheckpointEvent] = field(default_factory=list)

    def losses(self) -> List[float]:
        return [r.loss for r in self.rows]

    def add_checkpoint(self, event: CheckpointEvent) -> None:
        if self.checkpoints and event.best_dice <= self.checkpoints[-1].best_dice:
            raise UsageError("Checkpoint events must strictly improve the best Dice")
        self.checkpoints.append(event)


@dataclass
class TrainResult:
    model: Model
    history: TrainHistory
    checkpoint: bytes
    norm_stats: NormStats


def _random_origin(shape: Shape3, patch: Shape3, rng: np.random.Generator) -> Shape3:
    # uniform over every origin whose window stays in the volume (0 when the axis is shorter than the patch)
    return tuple(int(rng.integers(0, max(n - p, 0) + 1)) for n, p in zip(shape, patch))


def _normalized_patch(ct: Volume, origin: Shape3, patch: Shape3, stats: NormStats) -> Volume:
    """Normalize only the window; padding beyond the volume stays 0 in normalized units."""
    window = normalize(extract_patch(ct, origin, patch), stats)
    valid = tuple(min(p, n - o) for o, p, n in zip(origin, patch, ct.shape))
    if valid == tuple(patch):
        return window
    data = np.zeros(tuple(patch), dtype=window.data.dtype)
    inside = tuple(slice(0, v) for v in valid)
    data[inside] = window.data[inside]
    return window.with_data(data)


def sample_minibatch(
    cases: Sequence[Case],
    patch: Shape3,
    batch_size: int,
    stats: NormStats,
    aug: AugmentParams,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw ``batch_size`` (case, origin) pairs and build the network batch.

    Args:
        cases: Training cases, already on the 1 mm grid.
        patch: Patch size (pd, ph, pw).
        batch_size: Number of patches.
        stats: Training-split normalization statistics.
        aug: Augmentation applied to every CT/label pair.
        rng: Source of all randomness; the batch is a function of its state.

    Returns:
        CT batch (N, 1, pd, ph, pw) float32 and label batch (N, pd, ph, pw) uint8.
    """
    if not cases:
        raise UsageError("sample_minibatch needs at least one training case")
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    patch = tuple(patch)
    cts, labels = [], []
    for _ in range(batch_size):
        case = cases[int(rng.integers(0, len(cases)))]
        origin = _random_origin(case.ct.shape, patch, rng)
        ct_patch = _normalized_patch(case.ct, origin, patch, stats)
        label_patch = extract_patch(case.label, origin, patch)
        ct_patch, label_patch = augment(ct_patch, label_patch, aug, rng)
        cts.append(ct_patch.data)
        labels.append(label_patch.data)
    return np.stack(cts)[:, None].astype(np.float32), np.stack(labels).astype(np.uint8)


def validate(
    model: Model,
    cases: Sequence[Case],
    stats: NormStats,
    spec: PatchSpec,
    aug: Optional[AugmentParams] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """
    Mean bone and nerve Dice of ``model`` over ``cases`` (averaged per case).

    When ``aug`` is given the normalized volumes get noise and flips first.
    """
    if not cases:
        raise UsageError("validate needs at least one case")
    bone, nerve = [], []
    for case in cases:
        prepared = case.resampled(ISOTROPIC_1MM)
        ct, label = normalize(prepared.ct, stats), prepared.label
        if aug is not None:
            ct, label = augment(ct, label, AugmentParams(aug.noise_sigma, aug.flip_prob, 0.0), rng)
        counts = confusion_counts(combine(sliding_window_infer(model, ct, spec)), label)
        bone.append(dice(counts, BONE))
        nerve.append(dice(counts, NERVE))
    return float(np.mean(bone)), float(np.mean(nerve))


def train(
    store: CaseStore,
    config: TrainConfig,
    model_config: ModelConfig,
    metrics: Optional[TrainingMetrics] = None,
) -> TrainResult:
    """
    Run the full schedule and return the best checkpoint's model.

    Every iteration draws its minibatch from ``default_rng([seed, iteration])``
    so a run is reproducible from the config alone. Validation fires after
    iterations that are multiples of ``validation_interval``; a checkpoint is
    taken only when the mean validation Dice beats the best so far.
    """
    if store.split is None:
        raise UsageError("train needs a CaseStore with a split attached")
    train_cases = store.role_cases("train")
    validation_ids = list(store.split.validation)
    if not train_cases:
        raise UsageError("Training split is empty")
    if config.validation_cases > len(validation_ids):
        raise UsageError(
            f"validation_cases={config.validation_cases} exceeds the {len(validation_ids)} validation cases"
        )

    stats = compute_norm_stats([c.ct for c in train_cases])
    model = build_unet(model_config, np.random.default_rng(config.seed))
    spec = config.spec
    history = TrainHistory()
    best_dice, checkpoint = -1.0, None
    logger.info(
        "training started",
        train_cases=len(train_cases),
        validation_cases=len(validation_ids),
        iterations=config.total_iterations,
        norm_mean=round(stats.mean, 4),
        norm_std=round(stats.std, 4),
    )

    current_epoch = -1
    for iteration in range(1, config.total_iterations + 1):
        epoch = (iteration - 1) // config.iterations_per_epoch
        weights = schedule_weights(epoch, config.schedule)
        if epoch != current_epoch:
            current_epoch = epoch
            if metrics is not None:
                metrics.record_class_weights(dict(zip(CLASS_NAMES, weights.as_array().tolist())))

        rng = np.random.default_rng([config.seed, iteration])
        x, y = sample_minibatch(train_cases, config.patch, config.batch_size, stats, config.augment, rng)
        logits = model.forward_logits(x, keep_cache=True)
        loss, dlogits = weighted_ce_loss(logits, y, weights, config.loss_reduction)
        if not np.isfinite(loss):
            logger.error("training diverged", iteration=iteration, epoch=epoch, loss=loss)
            raise DivergenceError("Loss became non-finite", iteration=iteration)
        model.backward(dlogits)
        try:
            sgd_step(model.parameters(), config.lr)
        except DivergenceError as e:
            logger.error("training diverged", iteration=iteration, epoch=epoch, error=str(e))
            raise DivergenceError("Gradient became non-finite", iteration=iteration) from e
        if metrics is not None:
            metrics.record_iteration(loss)

        row = HistoryRow(iteration=iteration, epoch=epoch, loss=loss)
        if iteration % config.validation_interval == 0:
            val_rng = np.random.default_rng([config.seed, iteration, _VALIDATION_STREAM])
            picked = sorted(val_rng.choice(len(validation_ids), size=config.validation_cases, replace=False))
            chosen = [store.get(validation_ids[i], "validation") for i in picked]
            aug = config.augment if config.augment_validation else None
            dice_bone, dice_nerve = validate(model, chosen, stats, spec, aug, val_rng)
            event = ValidationEvent(iteration, epoch, tuple(c.case_id for c in chosen), dice_bone, dice_nerve)
            history.validations.append(event)

            improved = event.mean_dice > best_dice
            if improved:
                best_dice = event.mean_dice
                checkpoint = save_checkpoint(model, epoch, iteration, best_dice)
                history.add_checkpoint(CheckpointEvent(iteration, best_dice))
            if metrics is not None:
                metrics.record_validation(event.mean_dice, improved, best_dice)
            logger.info(
                "validation finished",
                iteration=iteration,
                epoch=epoch,
                dice_bone=round(dice_bone, 4),
                dice_nerve=round(dice_nerve, 4),
                mean_dice=round(event.mean_dice, 4),
                checkpointed=improved,
            )
            row = HistoryRow(iteration, epoch, loss, dice_bone, dice_nerve, improved)
        history.rows.append(row)

        if iteration % config.iterations_per_epoch == 0:
            recent = history.losses()[-config.iterations_per_epoch:]
            logger.debug("epoch finished", epoch=epoch, mean_loss=float(np.mean(recent)))

    if checkpoint is None:
        # no validation fired; keep the final weights
        logger.warning("no validation during training, checkpointing final model")
        checkpoint = save_checkpoint(model, config.total_epochs - 1, config.total_iterations, float("nan"))

    best_model, meta = load_checkpoint(checkpoint)
    logger.info("training finished", best_dice=meta.best_dice, best_iteration=meta.iteration)
    return TrainResult(model=best_model, history=history, checkpoint=checkpoint, norm_stats=stats)

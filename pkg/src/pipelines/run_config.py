"""
Typed run configuration assembled from a validated config document.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from network.objective import ClassWeights, WeightSchedule
from network.unet import ModelConfig
from pipelines.preprocess import AugmentParams
from pipelines.training import TrainConfig
from utils.config import DEFAULTS, read_document, write_document
from utils.errors import ConfigError, UsageError
from volumes.phantom import PhantomConfig

REFERENCE_SCHEDULE = WeightSchedule()


@dataclass(frozen=True)
class SplitConfig:
    seed: int = 0
    fold: int = 0
    n_folds: int = 5
    test_fraction: float = 0.2

    def validation_size(self, n_cases: int) -> int:
        n_test = max(1, int(round(n_cases * self.test_fraction)))
        pool = n_cases - n_test
        if pool < self.n_folds:
            return 0
        return len(np.array_split(np.arange(pool), self.n_folds)[self.fold])


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass(frozen=True)
class LoggingConfig:
    level: str = "INFO"
    format: str = "json"
    file: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    n_cases: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @property
    def augment(self) -> AugmentParams:
        return self.train.augment


def _build(doc: Dict[str, Any]) -> RunConfig:
    phantom_raw = dict(doc["phantom"])
    n_cases = phantom_raw.pop("cases")
    for key in ("shape", "spacing", "nerve_radius", "bone_size", "bone_count", "nerve_count"):
        phantom_raw[key] = tuple(phantom_raw[key])
    phantom = PhantomConfig(**phantom_raw)

    model = ModelConfig(**doc["model"])
    augment = AugmentParams(**doc["augment"])

    train_raw = dict(doc["train"])
    split = SplitConfig(
        seed=train_raw["seed"],
        fold=train_raw.pop("fold"),
        n_folds=train_raw.pop("n_folds"),
        test_fraction=train_raw.pop("test_fraction"),
    )
    schedule_raw = train_raw.pop("schedule")
    total = train_raw["total_epochs"]
    if schedule_raw["switch_epoch"] is None:
        schedule = WeightSchedule(
            early=ClassWeights(*schedule_raw["early"]),
            late=ClassWeights(*schedule_raw["late"]),
            switch_epoch=REFERENCE_SCHEDULE.switch_epoch,
            total_epochs=REFERENCE_SCHEDULE.total_epochs,
        ).scaled(total)
    else:
        schedule = WeightSchedule(
            early=ClassWeights(*schedule_raw["early"]),
            late=ClassWeights(*schedule_raw["late"]),
            switch_epoch=schedule_raw["switch_epoch"],
            total_epochs=total,
        )
    train_raw["patch"] = tuple(train_raw["patch"])
    train_raw["stride"] = tuple(train_raw["stride"])
    train = TrainConfig(schedule=schedule, augment=augment, **train_raw)

    return RunConfig(
        phantom=phantom,
        n_cases=n_cases,
        model=model,
        train=train,
        split=split,
        paths=PathsConfig(**doc["paths"]),
        logging=LoggingConfig(**doc["logging"]),
    )


def _check_cross_fields(config: RunConfig, check_split: bool) -> None:
    problems = []
    divisor = 2 ** config.model.levels
    if any(p % divisor for p in config.train.patch):
        problems.append(f"train.patch {config.train.patch} must be divisible by 2**levels = {divisor}")
    if not config.split.fold < config.split.n_folds:
        problems.append(f"train.fold {config.split.fold} must be < n_folds {config.split.n_folds}")
    elif check_split:
        val_size = config.split.validation_size(config.n_cases)
        if config.train.validation_cases > val_size:
            problems.append(
                f"train.validation_cases {config.train.validation_cases} exceeds the validation set of "
                f"{val_size} cases for {config.n_cases} phantom cases"
            )
    try:
        config.phantom.check_fits()
    except UsageError as e:
        problems.append(str(e))
    if problems:
        raise ConfigError("Invalid run config: " + "; ".join(problems), errors=problems)


def load_config(
    source: Union[str, Path, Mapping[str, Any], None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    check_split: bool = True,
) -> RunConfig:
    """
    Build a RunConfig from a YAML file (or an already parsed mapping).

    Args:
        source: Path of a YAML document, a mapping, or None for pure defaults.
        overrides: Dotted-key values that win over the document.
        check_split: Also require validation_cases to fit the validation
            split of phantom.cases cases.

    Returns:
        Fully validated RunConfig.
    """
    document = read_document(source, overrides)
    try:
        config = _build(document)
    except UsageError as e:
        raise ConfigError(f"Invalid run config: {e}", errors=[str(e)]) from e
    _check_cross_fields(config, check_split)
    return config


def dump_config(config: RunConfig) -> Dict[str, Any]:
    """Fully populated mapping with ``load_config(dump_config(c)) == c``."""
    phantom = {"cases": config.n_cases}
    phantom.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config.phantom).items()})
    train = config.train
    return {
        "phantom": phantom,
        "augment": asdict(train.augment),
        "model": {k: getattr(config.model, k) for k in DEFAULTS["model"]},
        "train": {
            "lr": train.lr,
            "batch_size": train.batch_size,
            "patch": list(train.patch),
            "stride": list(train.stride),
            "total_epochs": train.total_epochs,
            "iterations_per_epoch": train.iterations_per_epoch,
            "validation_interval": train.validation_interval,
            "validation_cases": train.validation_cases,
            "seed": train.seed,
            "fold": config.split.fold,
            "n_folds": config.split.n_folds,
            "test_fraction": config.split.test_fraction,
            "loss_reduction": train.loss_reduction,
            "augment_validation": train.augment_validation,
            "schedule": {
                "early": train.schedule.early.as_array().tolist(),
                "late": train.schedule.late.as_array().tolist(),
                "switch_epoch": train.schedule.switch_epoch,
            },
        },
        "paths": asdict(config.paths),
        "logging": asdict(config.logging),
    }


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    return write_document(dump_config(config), path)

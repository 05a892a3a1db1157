"""
Run configuration: YAML documents validated against a JSON schema, with
documented defaults and command-line overrides.
"""
import copy
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml
from jsonschema import Draft7Validator

from utils.errors import ConfigError
from utils.logger import setup_logger

logger = setup_logger(__name__)

DEFAULTS: Dict[str, Any] = {
    "phantom": {
        "cases": 50,
        "shape": [48, 64, 64],
        "spacing": [1.0, 1.0, 1.0],
        "background_mean": -50.0,
        "background_std": 30.0,
        "bone_mean": 700.0,
        "bone_std": 80.0,
        "nerve_mean": 60.0,
        "nerve_std": 20.0,
        "nerve_radius": [1, 3],
        "bone_size": [6, 16],
        "bone_count": [1, 2],
        "nerve_count": [2, 4],
        "seed": 0,
    },
    "augment": {
        "noise_sigma": 0.1,
        "flip_prob": 0.5,
        "jitter_mm": 0.2,
    },
    "model": {
        "levels": 4,
        "base_channels": 32,
        "convs_per_level": 2,
        "growth": 2,
    },
    "train": {
        "lr": 5e-4,
        "batch_size": 4,
        "patch": [32, 64, 64],
        "stride": [20, 40, 40],
        "total_epochs": 100,
        "iterations_per_epoch": 100,
        "validation_interval": 100,
        "validation_cases": 6,
        "seed": 0,
        "fold": 0,
        "n_folds": 5,
        "test_fraction": 0.2,
        "loss_reduction": "sum",
        "augment_validation": False,
        "schedule": {
            "early": [1.0, 1.0, 20.0],
            "late": [1.0, 1.0, 2.0],
            # null: the reference switch point scaled to total_epochs
            "switch_epoch": None,
        },
    },
    "paths": {
        "data_dir": "data",
        "out_dir": "runs",
    },
    "logging": {
        "level": "INFO",
        "format": "json",
        "file": None,
    },
}


def _triple(item_type: str, minimum: float, exclusive: bool = False) -> Dict[str, Any]:
    bound = {"exclusiveMinimum": minimum} if exclusive else {"minimum": minimum}
    return {"type": "array", "items": {"type": item_type, **bound}, "minItems": 3, "maxItems": 3}


def _int_range() -> Dict[str, Any]:
    return {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}


def _section(properties: Dict[str, Any]) -> Dict[str, Any]:
    return {"type": "object", "properties": properties, "additionalProperties": False}


SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "phantom": _section({
            "cases": {"type": "integer", "minimum": 1},
            "shape": _triple("integer", 1),
            "spacing": _triple("number", 0, exclusive=True),
            "background_mean": {"type": "number"},
            "background_std": {"type": "number", "minimum": 0},
            "bone_mean": {"type": "number"},
            "bone_std": {"type": "number", "minimum": 0},
            "nerve_mean": {"type": "number"},
            "nerve_std": {"type": "number", "minimum": 0},
            "nerve_radius": _int_range(),
            "bone_size": _int_range(),
            "bone_count": _int_range(),
            "nerve_count": _int_range(),
            "seed": {"type": "integer", "minimum": 0},
        }),
        "augment": _section({
            "noise_sigma": {"type": "number", "minimum": 0},
            "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
            "jitter_mm": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        }),
        "model": _section({
            "levels": {"type": "integer", "minimum": 1, "maximum": 8},
            "base_channels": {"type": "integer", "minimum": 1},
            "convs_per_level": {"type": "integer", "minimum": 1},
            "growth": {"type": "integer", "minimum": 1},
        }),
        "train": _section({
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "batch_size": {"type": "integer", "minimum": 1},
            "patch": _triple("integer", 1),
            "stride": _triple("integer", 1),
            "total_epochs": {"type": "integer", "minimum": 2},
            "iterations_per_epoch": {"type": "integer", "minimum": 1},
            "validation_interval": {"type": "integer", "minimum": 1},
            "validation_cases": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "fold": {"type": "integer", "minimum": 0},
            "n_folds": {"type": "integer", "minimum": 1},
            "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "loss_reduction": {"enum": ["sum", "mean"]},
            "augment_validation": {"type": "boolean"},
            "schedule": _section({
                "early": _triple("number", 0, exclusive=True),
                "late": _triple("number", 0, exclusive=True),
                "switch_epoch": {"type": ["integer", "null"], "minimum": 1},
            }),
        }),
        "paths": _section({
            "data_dir": {"type": "string", "minLength": 1},
            "out_dir": {"type": "string", "minLength": 1},
        }),
        "logging": _section({
            "level": {"enum": ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]},
            "format": {"enum": ["json", "console"]},
            "file": {"type": ["string", "null"]},
        }),
    },
}


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_overrides(document: Mapping[str, Any], overrides: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Set dotted keys (``"train.seed"``) on a copy of ``document``; ``None`` values are skipped."""
    result = copy.deepcopy(dict(document))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = result
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override {dotted} crosses a non-section value")
        node[leaf] = value
    return result


def validate_document(document: Any) -> None:
    """Schema validation; raises ConfigError listing every violation."""
    validator = Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(document), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        messages = [f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]
        for message in messages:
            logger.error("config validation failed", error=message)
        raise ConfigError("Invalid run config: " + "; ".join(messages), errors=messages)


def read_document(
    source: Union[str, Path, Mapping[str, Any], None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Load a config document, apply overrides, validate it and fill in defaults.

    Args:
        source: Path of a YAML document, a mapping, or None for pure defaults.
        overrides: Dotted-key values that win over the document.

    Returns:
        The validated document merged over DEFAULTS.
    """
    if source is None:
        document: Any = {}
    elif isinstance(source, Mapping):
        document = source
    else:
        try:
            document = yaml.safe_load(Path(source).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config {source} is not valid YAML: {e}") from e
        except OSError as e:
            raise ConfigError(f"Cannot read config {source}: {e}") from e
    if not isinstance(document, Mapping):
        raise ConfigError("Run config must be a mapping of sections")

    document = apply_overrides(document, overrides)
    validate_document(document)
    return _deep_merge(DEFAULTS, document)


def write_document(document: Mapping[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dict(document), sort_keys=False))
    return path

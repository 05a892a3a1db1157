"""
Preprocessing transforms: resampling, intensity normalization, patch
geometry and stochastic augmentation.
"""
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, TypeVar, Union

import numpy as np

from utils.errors import BoundsError, DataError, DegenerateDataError, UsageError
from utils.logger import setup_logger
from volumes.volgrid import Grid, LabelMask, Shape3, Spacing, Volume

logger = setup_logger(__name__)

G = TypeVar("G", bound=Grid)


@dataclass(frozen=True)
class NormStats:
    """Global intensity whitening computed over the training split."""
    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.std) and self.std > 0):
            raise UsageError(f"NormStats need finite mean and std > 0, got ({self.mean}, {self.std})")

    def checksum(self) -> str:
        canonical = json.dumps({"mean": repr(float(self.mean)), "std": repr(float(self.std))}, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"mean": float(self.mean), "std": float(self.std), "sha256": self.checksum()}
        path.write_text(json.dumps(record, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NormStats":
        try:
            record = json.loads(Path(path).read_text())
            stats = cls(mean=float(record["mean"]), std=float(record["std"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed normalization sidecar {path}: {e}") from e
        if stats.checksum() != record.get("sha256"):
            raise DataError(f"Normalization sidecar {path} failed its checksum")
        return stats


@dataclass(frozen=True)
class PatchSpec:
    patch: Shape3
    stride: Shape3

    def __post_init__(self):
        if len(self.patch) != 3 or len(self.stride) != 3:
            raise UsageError("Patch and stride need three components")
        for p, s in zip(self.patch, self.stride):
            if not (1 <= s <= p):
                raise UsageError(f"Stride {tuple(self.stride)} must satisfy 1 <= stride <= patch {tuple(self.patch)}")


@dataclass(frozen=True)
class AugmentParams:
    noise_sigma: float = 0.1
    flip_prob: float = 0.5
    jitter_mm: float = 0.2

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise UsageError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise UsageError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.jitter_mm < 1.0:
            raise UsageError(f"jitter_mm must lie in [0, 1), got {self.jitter_mm}")

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls(noise_sigma=0.0, flip_prob=0.0, jitter_mm=0.0)


def _nearest_indices(n_in: int, s_in: float, s_out: float) -> np.ndarray:
    extent = n_in * s_in
    n_out = max(1, int(np.floor(extent / s_out + 0.5)))
    centers_mm = (np.arange(n_out, dtype=np.float64) + 0.5) * s_out
    # ties at a shared voxel boundary go to the higher index
    idx = np.floor(centers_mm / s_in).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_nearest(grid: G, target: Spacing) -> G:
    """Nearest-neighbor resampling of a volume or label mask onto ``target``."""
    if grid.spacing == target:
        return grid
    axes = [
        _nearest_indices(n, s_in, s_out)
        for n, s_in, s_out in zip(grid.shape, grid.spacing.as_tuple(), target.as_tuple())
    ]
    data = grid.data[np.ix_(*axes)]
    return grid.with_data(data, target)


def compute_norm_stats(training_volumes: Sequence[Volume]) -> NormStats:
    """Pooled mean and population std over every training voxel."""
    if not training_volumes:
        raise UsageError("compute_norm_stats needs at least one training volume")
    count = sum(v.data.size for v in training_volumes)
    mean = sum(float(np.sum(v.data, dtype=np.float64)) for v in training_volumes) / count
    sq_dev = sum(float(np.sum((v.data.astype(np.float64) - mean) ** 2)) for v in training_volumes)
    std = float(np.sqrt(sq_dev / count))
    if not std > 0:
        raise DegenerateDataError("Training intensities have zero variance")
    logger.debug("normalization stats computed", mean=mean, std=std, voxels=count)
    return NormStats(mean=mean, std=std)


def normalize(volume: Volume, stats: NormStats) -> Volume:
    data = (volume.data.astype(np.float64) - stats.mean) / stats.std
    return Volume(data.astype(np.float32), volume.spacing)


def denormalize(volume: Volume, stats: NormStats) -> Volume:
    data = volume.data.astype(np.float64) * stats.std + stats.mean
    return Volume(data.astype(np.float32), volume.spacing)


def patch_origins(axis_len: int, patch: int, stride: int) -> List[int]:
    """Window origins along one axis, with the last window clamped to the edge."""
    if axis_len < 1:
        raise UsageError(f"axis_len must be >= 1, got {axis_len}")
    if patch < 1 or stride < 1:
        raise UsageError(f"patch and stride must be >= 1, got {patch}, {stride}")
    if axis_len <= patch:
        return [0]
    origins = list(range(0, axis_len - patch + 1, stride))
    last = axis_len - patch
    if origins[-1] != last:
        origins.append(last)
    return sorted(set(origins))


def window_origins(shape: Shape3, spec: PatchSpec) -> List[Shape3]:
    """Every origin triple of the sliding-window grid, depth-major order."""
    per_axis = [patch_origins(n, p, s) for n, p, s in zip(shape, spec.patch, spec.stride)]
    return [(d, h, w) for d in per_axis[0] for h in per_axis[1] for w in per_axis[2]]


def extract_patch(grid: G, origin: Shape3, size: Shape3) -> G:
    """Copy a sub-grid; the part beyond the grid is zero-padded."""
    if any(o < 0 for o in origin):
        raise BoundsError(f"Patch origin {tuple(origin)} has negative components")
    if any(o >= n for o, n in zip(origin, grid.shape)):
        raise BoundsError(f"Patch origin {tuple(origin)} beyond grid {grid.shape}")
    out = np.zeros(tuple(size), dtype=grid.data.dtype)
    valid = tuple(min(p, n - o) for o, p, n in zip(origin, size, grid.shape))
    src = tuple(slice(o, o + v) for o, v in zip(origin, valid))
    out[tuple(slice(0, v) for v in valid)] = grid.data[src]
    return grid.with_data(out)


def _fit_to_shape(grid: G, shape: Shape3) -> G:
    """Center-crop larger axes, end-pad smaller ones."""
    origin = tuple(max((n - s) // 2, 0) for n, s in zip(grid.shape, shape))
    return extract_patch(grid, origin, shape)


def augment(
    ct_patch: Volume,
    label_patch: LabelMask,
    params: AugmentParams,
    rng: np.random.Generator,
) -> Tuple[Volume, LabelMask]:
    """
    Noise, in-plane flips and voxel-size jitter, in that order.

    Flips and jitter are applied identically to CT and label so they stay
    aligned; the depth axis is never flipped. Output shapes and spacing equal
    the inputs'.
    """
    if ct_patch.shape != label_patch.shape:
        raise UsageError(f"CT patch {ct_patch.shape} and label patch {label_patch.shape} differ in shape")

    ct = ct_patch.as_float().data
    labels = label_patch.data

    if params.noise_sigma > 0:
        ct = ct + rng.normal(0.0, params.noise_sigma, size=ct.shape).astype(np.float32)

    for axis in (1, 2):
        if rng.random() < params.flip_prob:
            ct = np.flip(ct, axis=axis)
            labels = np.flip(labels, axis=axis)

    ct_out = Volume(ct, ct_patch.spacing)
    label_out = LabelMask(labels, label_patch.spacing)

    if params.jitter_mm > 0:
        base = ct_patch.spacing
        jittered = Spacing(*(s + rng.uniform(-params.jitter_mm, params.jitter_mm) for s in base.as_tuple()))
        ct_r = _fit_to_shape(resample_nearest(ct_out, jittered), ct_patch.shape)
        lb_r = _fit_to_shape(resample_nearest(label_out, jittered), label_patch.shape)
        # rescaled content is handed on as if still at the original voxel size
        ct_out = Volume(ct_r.data, base)
        label_out = LabelMask(lb_r.data, base)

    return ct_out, label_out

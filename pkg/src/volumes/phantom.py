"""
Synthetic CT-like phantoms with bone-analog solids and thin nerve-analog
tubes, labeled exactly by their generating geometry.
"""
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import yaml

from utils.errors import DataError, UsageError
from utils.logger import setup_logger
from volumes.volgrid import BACKGROUND, BONE, NERVE, LabelMask, Spacing, Volume, save_svol

logger = setup_logger(__name__)

MANIFEST_NAME = "manifest.txt"
PHANTOM_CONFIG_NAME = "phantom_config.yaml"
_MAX_PLACEMENT_ATTEMPTS = 20


@dataclass(frozen=True)
class PhantomConfig:
    shape: Tuple[int, int, int] = (48, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_mean: float = -50.0
    background_std: float = 30.0
    bone_mean: float = 700.0
    bone_std: float = 80.0
    nerve_mean: float = 60.0
    nerve_std: float = 20.0
    nerve_radius: Tuple[int, int] = (1, 3)
    bone_size: Tuple[int, int] = (6, 16)
    bone_count: Tuple[int, int] = (1, 2)
    nerve_count: Tuple[int, int] = (2, 4)
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise UsageError(f"Phantom shape must be three positive ints, got {self.shape}")
        if not self.background_mean < self.nerve_mean < self.bone_mean:
            raise UsageError("Intensity bands must be ordered background < nerve < bone")
        if min(self.background_std, self.bone_std, self.nerve_std) < 0:
            raise UsageError("Intensity spreads must be non-negative")
        for name in ("nerve_radius", "bone_size", "bone_count", "nerve_count"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise UsageError(f"{name} must satisfy 1 <= low <= high, got {(lo, hi)}")
        Spacing(*self.spacing)

    def config_hash(self) -> str:
        canonical = json.dumps(_plain(asdict(self)), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def check_fits(self) -> None:
        """Every structure needs room for itself plus a one-voxel margin."""
        need = max(self.bone_size[1], 2 * self.nerve_radius[1] + 1) + 2
        if min(self.shape) < need:
            raise UsageError(f"Phantom shape {self.shape} too small for structures; every axis needs >= {need}")


def _plain(value):
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    seed: int
    ct_path: str
    label_path: str


@dataclass(frozen=True)
class Manifest:
    config_hash: str
    entries: Tuple[ManifestEntry, ...]
    root: Path

    def case_ids(self) -> List[str]:
        return [e.case_id for e in self.entries]


def _grid(shape: Tuple[int, int, int]) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    return np.stack([zz, yy, xx], axis=-1)


def _bone_mask(coords: np.ndarray, shape, config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    size = rng.integers(config.bone_size[0], config.bone_size[1] + 1, size=3)
    lo = np.array([rng.integers(1, n - s) for n, s in zip(shape, size)])
    if rng.random() < 0.5:
        inside = np.ones(shape, dtype=bool)
        for axis in range(3):
            inside &= (coords[..., axis] >= lo[axis]) & (coords[..., axis] < lo[axis] + size[axis])
        return inside
    # cylinder along depth: radius from the in-plane extent
    radius = min(size[1], size[2]) / 2.0
    center = lo[1:] + np.array([size[1], size[2]]) / 2.0 - 0.5
    radial = (coords[..., 1] - center[0]) ** 2 + (coords[..., 2] - center[1]) ** 2 <= radius ** 2
    along = (coords[..., 0] >= lo[0]) & (coords[..., 0] < lo[0] + size[0])
    return radial & along


def _segment_distance(coords: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((coords - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(coords - closest, axis=-1)


def _nerve_mask(coords: np.ndarray, shape, config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Tube around a piecewise-linear centerline running through the depth axis."""
    D, H, W = shape
    radius = int(rng.integers(config.nerve_radius[0], config.nerve_radius[1] + 1))
    margin = radius + 1
    n_points = 4
    depths = np.linspace(0, D - 1, n_points)
    h = rng.uniform(margin, H - 1 - margin)
    w = rng.uniform(margin, W - 1 - margin)
    points = []
    for d in depths:
        points.append(np.array([d, h, w]))
        h = float(np.clip(h + rng.uniform(-8, 8), margin, H - 1 - margin))
        w = float(np.clip(w + rng.uniform(-8, 8), margin, W - 1 - margin))
    dist = np.full(shape, np.inf)
    for a, b in zip(points[:-1], points[1:]):
        dist = np.minimum(dist, _segment_distance(coords, a, b))
    return dist <= radius


def generate_case(config: PhantomConfig, case_seed: int) -> Tuple[Volume, LabelMask]:
    """One phantom CT (int16 HU-like) and its exact label mask."""
    config.check_fits()
    shape = tuple(config.shape)
    rng = np.random.default_rng(case_seed)
    coords = _grid(shape)

    for attempt in range(_MAX_PLACEMENT_ATTEMPTS):
        bone = np.zeros(shape, dtype=bool)
        for _ in range(int(rng.integers(config.bone_count[0], config.bone_count[1] + 1))):
            bone |= _bone_mask(coords, shape, config, rng)
        nerve = np.zeros(shape, dtype=bool)
        for _ in range(int(rng.integers(config.nerve_count[0], config.nerve_count[1] + 1))):
            nerve |= _nerve_mask(coords, shape, config, rng)
        nerve &= ~bone
        if bone.any() and nerve.any() and not (bone | nerve).all():
            break
        logger.debug("phantom placement retry", case_seed=case_seed, attempt=attempt)
    else:
        raise UsageError(f"Could not place all three classes in shape {shape} after {_MAX_PLACEMENT_ATTEMPTS} attempts")

    labels = np.full(shape, BACKGROUND, dtype=np.uint8)
    labels[nerve] = NERVE
    labels[bone] = BONE

    ct = rng.normal(config.background_mean, config.background_std, size=shape)
    ct[nerve] = rng.normal(config.nerve_mean, config.nerve_std, size=int(nerve.sum()))
    ct[bone] = rng.normal(config.bone_mean, config.bone_std, size=int(bone.sum()))
    ct = np.clip(np.rint(ct), np.iinfo(np.int16).min, np.iinfo(np.int16).max).astype(np.int16)

    spacing = Spacing(*config.spacing)
    return Volume(ct, spacing), LabelMask(labels, spacing)


def case_seeds(seed: int, n_cases: int) -> List[int]:
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=n_cases)]


def generate_dataset(config: PhantomConfig, n_cases: int, seed: int, out_dir: Union[str, Path]) -> Manifest:
    """Write ct_{i}.svol / label_{i}.svol pairs, the config and a manifest."""
    if n_cases < 1:
        raise UsageError(f"n_cases must be >= 1, got {n_cases}")
    config.check_fits()
    out_dir = Path(out_dir)
    entries = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, case_seed in enumerate(case_seeds(seed, n_cases)):
            ct, labels = generate_case(config, case_seed)
            ct_name, label_name = f"ct_{i}.svol", f"label_{i}.svol"
            save_svol(ct, out_dir / ct_name)
            save_svol(labels, out_dir / label_name)
            entries.append(ManifestEntry(case_id=f"case_{i:03d}", seed=case_seed, ct_path=ct_name, label_path=label_name))
            logger.debug("phantom case written", case_id=entries[-1].case_id, seed=case_seed)

        (out_dir / PHANTOM_CONFIG_NAME).write_text(yaml.safe_dump(_plain(asdict(config)), sort_keys=True))
        manifest = Manifest(config_hash=config.config_hash(), entries=tuple(entries), root=out_dir)
        write_manifest(manifest, out_dir / MANIFEST_NAME)
    except OSError as e:
        raise DataError(f"Failed writing phantom dataset under {out_dir}: {e}") from e

    logger.info("phantom dataset generated", cases=n_cases, seed=seed, out_dir=str(out_dir))
    return manifest


def regenerate_case(config: PhantomConfig, entry: ManifestEntry) -> Tuple[Volume, LabelMask]:
    return generate_case(config, entry.seed)


def load_phantom_config(path: Union[str, Path]) -> PhantomConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    for key in ("shape", "spacing", "nerve_radius", "bone_size", "bone_count", "nerve_count"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return PhantomConfig(**raw)


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> Path:
    lines = [f"# config_hash={manifest.config_hash}"]
    lines += [f"{e.case_id}\t{e.seed}\t{e.ct_path}\t{e.label_path}" for e in manifest.entries]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"Cannot read manifest {path}: {e}") from e
    if not lines or not lines[0].startswith("# config_hash="):
        raise DataError(f"Manifest {path} is missing its config_hash header")
    config_hash = lines[0].split("=", 1)[1].strip()
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"Manifest {path} line {lineno}: expected 4 tab-separated fields")
        try:
            entries.append(ManifestEntry(case_id=parts[0], seed=int(parts[1]), ct_path=parts[2], label_path=parts[3]))
        except ValueError as e:
            raise DataError(f"Manifest {path} line {lineno}: {e}") from e
    return Manifest(config_hash=config_hash, entries=tuple(entries), root=path.parent)

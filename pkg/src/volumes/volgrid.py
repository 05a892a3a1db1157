"""
Volumetric data types and the SVOL binary container.

Grids are stored depth-major, row-major: voxel (d, h, w) of a (D, H, W) grid
lives at linear index (d*H + h)*W + w. SVOL writes the payload in exactly that
order, little-endian.
"""
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from utils.errors import BoundsError, ContentError, FormatError, TruncationError, UsageError
from utils.logger import setup_logger

logger = setup_logger(__name__)

Shape3 = Tuple[int, int, int]

NUM_CLASSES = 3
BACKGROUND, BONE, NERVE = 0, 1, 2
CLASS_NAMES = ("background", "bone", "nerve")

SVOL_MAGIC = b"SVOL0001"
SVOL_EXTENSION = ".svol"
_SVOL_HEADER = struct.Struct("<8sIIII3f")

DTYPE_INT16, DTYPE_FLOAT32, DTYPE_LABEL = 0, 1, 2
_SVOL_DTYPES = {
    DTYPE_INT16: np.dtype("<i2"),
    DTYPE_FLOAT32: np.dtype("<f4"),
    DTYPE_LABEL: np.dtype("u1"),
}


@dataclass(frozen=True)
class Spacing:
    """Millimeters per voxel along depth, height and width."""
    sd: float
    sh: float
    sw: float

    def __post_init__(self):
        # held at float32 precision so SVOL round-trips are exact
        for name in ("sd", "sh", "sw"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))
        for value in self.as_tuple():
            if not (math.isfinite(value) and value > 0):
                raise UsageError(f"Spacing components must be positive and finite, got {self.as_tuple()}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (float(self.sd), float(self.sh), float(self.sw))

    @classmethod
    def isotropic(cls, mm: float = 1.0) -> "Spacing":
        return cls(mm, mm, mm)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.flags.writeable:
        array = array.copy()
        array.flags.writeable = False
    return array


class Grid:
    """Immutable 3D grid with spacing; base of Volume and LabelMask."""

    def __init__(self, data: np.ndarray, spacing: Optional[Spacing] = None):
        data = np.asarray(data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise UsageError(f"{type(self).__name__} needs a non-empty 3D array, got shape {data.shape}")
        self._validate(data)
        self._data = _frozen(data)
        self._spacing = spacing or Spacing.isotropic(1.0)

    def _validate(self, data: np.ndarray) -> None:
        pass

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def spacing(self) -> Spacing:
        return self._spacing

    @property
    def shape(self) -> Shape3:
        return tuple(int(n) for n in self._data.shape)

    def with_data(self, data: np.ndarray, spacing: Optional[Spacing] = None) -> "Grid":
        """New grid of the same kind; spacing defaults to this grid's."""
        return type(self)(data, spacing or self._spacing)

    def equals(self, other: "Grid") -> bool:
        return (
            type(self) is type(other)
            and self._spacing == other._spacing
            and self._data.dtype == other._data.dtype
            and np.array_equal(self._data, other._data)
        )

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, spacing={self._spacing.as_tuple()}, dtype={self._data.dtype})"


class Volume(Grid):
    """CT intensities, int16 (raw HU-like) or float32; the two dtypes SVOL stores."""

    def _validate(self, data: np.ndarray) -> None:
        if data.dtype not in (np.int16, np.float32):
            raise UsageError(f"Volume data must be int16 or float32, got {data.dtype}")
        if data.dtype == np.float32 and not np.all(np.isfinite(data)):
            raise ContentError("Volume contains non-finite values")

    def as_float(self) -> "Volume":
        if self.data.dtype == np.float32:
            return self
        return Volume(self.data.astype(np.float32), self.spacing)


class LabelMask(Grid):
    """Class codes 0=background, 1=bone, 2=nerve."""

    def __init__(self, data: np.ndarray, spacing: Optional[Spacing] = None):
        data = np.asarray(data)
        if data.dtype != np.uint8:
            if data.dtype.kind not in "iu" or (data.size and (data.min() < 0 or data.max() >= NUM_CLASSES)):
                raise ContentError(f"Label codes must lie in {{0,1,2}}, got dtype {data.dtype}")
            data = data.astype(np.uint8)
        super().__init__(data, spacing)

    def _validate(self, data: np.ndarray) -> None:
        if data.size and data.max() >= NUM_CLASSES:
            raise ContentError(f"Label code {int(data.max())} outside {{0,1,2}}")


class ProbMask:
    """
    Per-voxel class scores in channel-last layout (D, H, W, 3).

    A single softmax output sums to one per voxel; accumulated fusions sum to
    the number of windows that covered the voxel.
    """

    def __init__(self, data: np.ndarray, spacing: Optional[Spacing] = None):
        data = np.asarray(data)
        if data.ndim != 4 or data.shape[-1] != NUM_CLASSES:
            raise UsageError(f"ProbMask needs shape (D, H, W, {NUM_CLASSES}), got {data.shape}")
        if not np.all(np.isfinite(data)) or (data.size and data.min() < 0):
            raise ContentError("ProbMask scores must be finite and non-negative")
        self._data = _frozen(data)
        self._spacing = spacing or Spacing.isotropic(1.0)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def spacing(self) -> Spacing:
        return self._spacing

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(int(n) for n in self._data.shape)


def linear_index(d: int, h: int, w: int, shape: Shape3) -> int:
    """Row-major position of voxel (d, h, w) in a grid of ``shape``."""
    D, H, W = shape
    if not (0 <= d < D and 0 <= h < H and 0 <= w < W):
        raise BoundsError(f"Voxel ({d}, {h}, {w}) outside grid {tuple(shape)}")
    return (d * H + h) * W + w


def write_svol(grid: Union[Volume, LabelMask]) -> bytes:
    """Serialize a volume or label mask to SVOL bytes."""
    if isinstance(grid, LabelMask):
        code = DTYPE_LABEL
    elif grid.data.dtype == np.int16:
        code = DTYPE_INT16
    else:
        code = DTYPE_FLOAT32
    D, H, W = grid.shape
    header = _SVOL_HEADER.pack(SVOL_MAGIC, code, D, H, W, *grid.spacing.as_tuple())
    payload = np.ascontiguousarray(grid.data, dtype=_SVOL_DTYPES[code]).tobytes(order="C")
    return header + payload


def read_svol(blob: bytes) -> Union[Volume, LabelMask]:
    """Parse SVOL bytes, validating magic, dtype, dims and payload length."""
    if len(blob) < _SVOL_HEADER.size:
        raise TruncationError(f"SVOL header needs {_SVOL_HEADER.size} bytes, got {len(blob)}")
    magic, code, D, H, W, sd, sh, sw = _SVOL_HEADER.unpack_from(blob, 0)
    if magic != SVOL_MAGIC:
        raise FormatError(f"Bad SVOL magic {magic!r}")
    if code not in _SVOL_DTYPES:
        raise FormatError(f"Unknown SVOL dtype code {code}")
    if min(D, H, W) < 1:
        raise FormatError(f"SVOL dims must be positive, got {(D, H, W)}")

    dtype = _SVOL_DTYPES[code]
    expected = D * H * W * dtype.itemsize
    payload = blob[_SVOL_HEADER.size:]
    if len(payload) != expected:
        raise TruncationError(f"SVOL payload is {len(payload)} bytes, header declares {expected}")

    data = np.frombuffer(payload, dtype=dtype).reshape(D, H, W)
    try:
        spacing = Spacing(sd, sh, sw)
    except UsageError as e:
        raise FormatError(f"Bad SVOL spacing: {e}") from e
    if code == DTYPE_LABEL:
        return LabelMask(data.copy(), spacing)
    return Volume(data.astype(dtype.newbyteorder("=")), spacing)


def save_svol(grid: Union[Volume, LabelMask], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(write_svol(grid))
    except OSError as e:
        logger.error("failed to write svol", path=str(path), error=str(e))
        raise
    return path


def load_svol(path: Union[str, Path]) -> Union[Volume, LabelMask]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        logger.error("failed to read svol", path=str(path), error=str(e))
        raise
    return read_svol(blob)

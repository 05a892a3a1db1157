import struct

import numpy as np
import pytest

from utils.errors import BoundsError, ContentError, FormatError, TruncationError, UsageError
from volumes.volgrid import (
    SVOL_MAGIC,
    LabelMask,
    ProbMask,
    Spacing,
    Volume,
    linear_index,
    load_svol,
    read_svol,
    save_svol,
    write_svol,
)

pytestmark = pytest.mark.unit


def test_linear_index_examples():
    assert linear_index(0, 0, 0, (5, 6, 7)) == 0
    assert linear_index(1, 0, 0, (2, 3, 4)) == 12
    assert linear_index(1, 2, 3, (2, 3, 4)) == 23


def test_linear_index_is_bijective():
    shape = (3, 4, 5)
    seen = [linear_index(d, h, w, shape) for d in range(3) for h in range(4) for w in range(5)]
    assert seen == list(range(60))


@pytest.mark.parametrize("coords", [(-1, 0, 0), (2, 0, 0), (0, 3, 0), (0, 0, 4)])
def test_linear_index_out_of_range(coords):
    with pytest.raises(BoundsError):
        linear_index(*coords, (2, 3, 4))


def test_spacing_rejects_non_positive():
    with pytest.raises(UsageError):
        Spacing(1.0, 0.0, 1.0)
    with pytest.raises(UsageError):
        Spacing(1.0, float("nan"), 1.0)


def test_volume_rejects_non_finite():
    with pytest.raises(ContentError):
        Volume(np.array([[[np.inf]]], dtype=np.float32))


@pytest.mark.parametrize("dtype", [np.float64, np.float16, np.int32, np.uint8])
def test_volume_accepts_only_svol_dtypes(dtype):
    with pytest.raises(UsageError):
        Volume(np.zeros((2, 2, 2), dtype=dtype))


def test_label_mask_rejects_bad_codes():
    with pytest.raises(ContentError):
        LabelMask(np.array([[[0, 3]]], dtype=np.uint8))
    with pytest.raises(ContentError):
        LabelMask(np.array([[[-1, 0]]]))


def test_grids_are_read_only():
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_write_svol_single_float_voxel_bytes():
    blob = write_svol(Volume(np.zeros((1, 1, 1), dtype=np.float32)))
    expected = SVOL_MAGIC + struct.pack("<IIII3f", 1, 1, 1, 1, 1.0, 1.0, 1.0) + b"\x00" * 4
    assert blob == expected
    assert blob[:8] == b"SVOL0001"


def test_write_svol_label_payload():
    blob = write_svol(LabelMask(np.array([1, 2], dtype=np.uint8).reshape(2, 1, 1)))
    assert struct.unpack_from("<I", blob, 8)[0] == 2
    assert blob[-2:] == b"\x01\x02"


def test_write_svol_int16_code():
    blob = write_svol(Volume(np.array([[[-5, 700]]], dtype=np.int16)))
    assert struct.unpack_from("<I", blob, 8)[0] == 0
    assert blob[-4:] == struct.pack("<hh", -5, 700)


def test_svol_round_trip_random(rng):
    for _ in range(25):
        shape = tuple(int(n) for n in rng.integers(1, 9, size=3))
        spacing = Spacing(*rng.uniform(0.3, 3.0, size=3))
        vol = Volume(rng.normal(size=shape).astype(np.float32), spacing)
        mask = LabelMask(rng.integers(0, 3, size=shape), spacing)
        ct = Volume(rng.integers(-1000, 2000, size=shape).astype(np.int16), spacing)
        for grid in (vol, mask, ct):
            back = read_svol(write_svol(grid))
            assert back.equals(grid)
            assert write_svol(back) == write_svol(grid)


def test_read_svol_bad_magic():
    blob = bytearray(write_svol(Volume(np.zeros((1, 1, 1), dtype=np.float32))))
    blob[:8] = b"XXXX0001"
    with pytest.raises(FormatError):
        read_svol(bytes(blob))


def test_read_svol_unknown_dtype():
    blob = bytearray(write_svol(Volume(np.zeros((1, 1, 1), dtype=np.float32))))
    struct.pack_into("<I", blob, 8, 7)
    with pytest.raises(FormatError):
        read_svol(bytes(blob))


@pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -2.0, 1.0), (1.0, 1.0, float("nan"))])
def test_read_svol_bad_spacing_is_a_format_error(spacing):
    header = SVOL_MAGIC + struct.pack("<IIII3f", 1, 1, 1, 1, *spacing)
    with pytest.raises(FormatError):
        read_svol(header + b"\x00" * 4)


def test_read_svol_truncated_payload():
    header = SVOL_MAGIC + struct.pack("<IIII3f", 2, 2, 2, 2, 1.0, 1.0, 1.0)
    with pytest.raises(TruncationError):
        read_svol(header + b"\x00" * 7)
    with pytest.raises(TruncationError):
        read_svol(header[:10])


def test_read_svol_label_code_out_of_range():
    header = SVOL_MAGIC + struct.pack("<IIII3f", 2, 1, 1, 2, 1.0, 1.0, 1.0)
    with pytest.raises(ContentError):
        read_svol(header + b"\x00\x05")


def test_save_and_load_svol(tmp_path, random_labels):
    mask = random_labels()
    path = save_svol(mask, tmp_path / "nested" / "mask.svol")
    assert load_svol(path).equals(mask)


def test_prob_mask_validation():
    with pytest.raises(UsageError):
        ProbMask(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ContentError):
        ProbMask(-np.ones((1, 1, 1, 3)))
    assert ProbMask(np.full((1, 2, 2, 3), 1 / 3)).shape == (1, 2, 2, 3)

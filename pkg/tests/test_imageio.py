"""Blob and PPM round trips and corruption handling."""

import numpy as np
import pytest

from imfa.errors import DatasetIOError, DimensionError
from imfa.imageio import (read_blob, read_ppm, validate_image, write_blob,
                          write_ppm)


def test_blob_round_trip_bit_exact(tmp_path):
    img = np.random.default_rng(0).uniform(size=(8, 6, 3)).astype(np.float32)
    path = str(tmp_path / "x.bin")
    write_blob(path, img)
    back = read_blob(path)
    assert back.tobytes() == img.tobytes()
    assert back.shape == (8, 6, 3) and back.dtype == np.float32


def test_blob_bad_magic(tmp_path):
    path = str(tmp_path / "x.bin")
    with open(path, "wb") as fh:
        fh.write(b"JUNK" + b"\x00" * 12)
    with pytest.raises(DatasetIOError):
        read_blob(path)


def test_blob_truncated(tmp_path):
    img = np.zeros((4, 4, 3), dtype=np.float32)
    path = str(tmp_path / "x.bin")
    write_blob(path, img)
    with open(path, "rb") as fh:
        raw = fh.read()
    with open(path, "wb") as fh:
        fh.write(raw[:20])
    with pytest.raises(DatasetIOError):
        read_blob(path)


def test_blob_missing_file(tmp_path):
    with pytest.raises(DatasetIOError):
        read_blob(str(tmp_path / "absent.bin"))


def test_blob_rejects_2d(tmp_path):
    with pytest.raises(DimensionError):
        write_blob(str(tmp_path / "x.bin"), np.zeros((4, 4), dtype=np.float32))


def test_ppm_round_trip_quantized(tmp_path):
    img = np.random.default_rng(1).uniform(size=(5, 7, 3)).astype(np.float32)
    path = str(tmp_path / "x.ppm")
    write_ppm(path, img)
    back = read_ppm(path)
    # one quantization to 8 bits, exact thereafter
    np.testing.assert_allclose(back, np.round(img * 255) / 255, atol=1e-7)
    write_ppm(str(tmp_path / "y.ppm"), back)
    assert read_ppm(str(tmp_path / "y.ppm")).tobytes() == back.tobytes()


def test_ppm_rejects_wrong_format(tmp_path):
    path = str(tmp_path / "x.ppm")
    with open(path, "wb") as fh:
        fh.write(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(DatasetIOError):
        read_ppm(path)


def test_ppm_truncated_body(tmp_path):
    path = str(tmp_path / "x.ppm")
    with open(path, "wb") as fh:
        fh.write(b"P6\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(DatasetIOError):
        read_ppm(path)


def test_validate_image_contract():
    ok = validate_image(np.zeros((32, 64, 3)))
    assert ok.dtype == np.float32
    with pytest.raises(DimensionError):
        validate_image(np.zeros((32, 64)))
    with pytest.raises(DimensionError):
        validate_image(np.zeros((30, 64, 3)))

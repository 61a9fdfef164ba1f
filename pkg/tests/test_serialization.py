"""Binary tensor container: format fields and bit-exact round-trips."""

import struct

import numpy as np
import pytest

from spirit.serialization import MAGIC, read_tensors, write_pgm, write_ppm, write_tensors


def test_round_trip_bit_exact(tmp_path, rng):
    tensors = [
        ("alpha", rng.standard_normal((3, 4)).astype(np.float32)),
        ("nested/name", rng.standard_normal(7).astype(np.float32)),
        ("scalarish", np.array([42.0], np.float32)),
    ]
    path = tmp_path / "params.ckpt"
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert [n for n, _ in back] == [n for n, _ in tensors]
    for (_, want), (_, got) in zip(tensors, back):
        assert got.dtype == np.float32
        assert got.shape == want.shape
        assert got.tobytes() == want.tobytes()


def test_rewrite_is_byte_identical(tmp_path, rng):
    tensors = [("w", rng.standard_normal((2, 5)).astype(np.float32))]
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    write_tensors(p1, tensors)
    write_tensors(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "one.ckpt"
    write_tensors(path, [("x", np.zeros((2, 3), np.float32))])
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    version, count = struct.unpack_from("<II", blob, 4)
    assert (version, count) == (1, 1)
    (name_len,) = struct.unpack_from("<I", blob, 12)
    assert blob[16 : 16 + name_len] == b"x"
    rank_off = 16 + name_len
    (rank,) = struct.unpack_from("<I", blob, rank_off)
    assert rank == 2
    assert struct.unpack_from("<2I", blob, rank_off + 4) == (2, 3)
    assert len(blob) == rank_off + 4 + 8 + 2 * 3 * 4


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        read_tensors(path)


def test_truncated_file_raises(tmp_path):
    path = tmp_path / "trunc.ckpt"
    write_tensors(path, [("x", np.zeros(10, np.float32))])
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_tensors(path)


def test_ppm_pgm_export(tmp_path, rng):
    image = rng.uniform(0, 1, (3, 4, 5)).astype(np.float32)
    mask = rng.integers(0, 2, (4, 5))
    ppm = tmp_path / "img.ppm"
    pgm = tmp_path / "mask.pgm"
    write_ppm(ppm, image)
    write_pgm(pgm, mask, classes=2)
    blob = ppm.read_bytes()
    assert blob.startswith(b"P6\n5 4\n255\n")
    assert len(blob) == len(b"P6\n5 4\n255\n") + 3 * 4 * 5
    blob = pgm.read_bytes()
    assert blob.startswith(b"P5\n5 4\n255\n")
    pixels = np.frombuffer(blob[len(b"P5\n5 4\n255\n"):], np.uint8).reshape(4, 5)
    np.testing.assert_array_equal(pixels, mask * 255)

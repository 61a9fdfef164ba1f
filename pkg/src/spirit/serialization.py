"""Binary container for named float32 tensors, plus PGM/PPM image export.

The container is the on-disk format for both parameter checkpoints and
dataset files.  Layout (all integers little-endian):

    magic   4 bytes  b"SPRT"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor:
        name_len u32
        name     UTF-8 bytes
        rank     u32
        dims     u32 * rank
        data     float32 * prod(dims), raw little-endian

Round-trips are bit-exact for float32 data.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SPRT"
VERSION = 1


def write_tensors(path, tensors):
    """Write ordered (name, array) pairs; arrays are stored as float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path):
    """Read back the ordered (name, array) pairs written by ``write_tensors``."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    offset = 12
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        end = offset + 4 * n
        if end > len(blob):
            raise ValueError(f"{path}: truncated container (tensor '{name}')")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(dims).copy()
        offset = end
        out.append((name, arr))
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after last tensor")
    return out


def write_ppm(path, image):
    """Write a (3, H, W) float image in [0, 1] as a binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3, H, W) image, got {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def write_pgm(path, mask, classes):
    """Write an integer (H, W) class mask as a binary PGM (P5), spread over gray levels."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"write_pgm: expected (H, W) mask, got {mask.shape}")
    if classes < 2:
        raise ValueError(f"write_pgm: classes must be >= 2, got {classes}")
    scale = 255 // (classes - 1)
    pixels = (mask * scale).clip(0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())

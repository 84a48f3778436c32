"""``DLT1`` binary tensor files.

Layout: ``b"DLT1"``, u32 rank, ``rank`` u32 extents, then the raw
little-endian scalars in row-major order. The scalar width (float32 or
float64) is implied by the payload length.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"DLT1"


class TensorFormatError(ValueError):
    pass


def encode_tensor(t: Tensor) -> bytes:
    dtype = "<f8" if t.dtype == np.float64 else "<f4"
    head = MAGIC + struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
    return head + t.data.astype(dtype).tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 8:
        raise TensorFormatError(f"truncated DLT1 header: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r} at offset 0, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise TensorFormatError(f"truncated DLT1 extents: need {head} bytes, have {len(buf)}")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape)) if rank else 1
    payload = len(buf) - head
    if payload == 4 * count:
        dtype = "<f4"
    elif payload == 8 * count:
        dtype = "<f8"
    else:
        raise TensorFormatError(
            f"DLT1 payload of {payload} bytes at offset {head} does not hold {count} "
            f"float32 or float64 scalars")
    data = np.frombuffer(buf, dtype=dtype, offset=head).reshape(shape)
    return Tensor(data.astype(dtype[1:]))


def save_tensor(t: Tensor, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())

"""Dense tensor primitives and the raw binary tensor format.

Tensors are plain ``numpy.ndarray`` objects in row-major order; images are
channel-first ``[C, H, W]`` and batches ``[B, C, H, W]``.
"""

from __future__ import annotations

import struct
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import numpy.typing as npt

from utils.constants import TENSOR_MAGIC, TENSOR_VERSION
from utils.exceptions import FormatError, RangeError, ShapeError

Tensor = npt.NDArray[np.floating]
PathLike = Union[str, Path]

_HEADER = struct.Struct("<4sII")  # magic, version, rank
_DIM = struct.Struct("<Q")


class ReduceOp(Enum):
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    ARGMAX = "argmax"


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"Invalid shape {shape}: need at least one dimension, all >= 1")
    return shape


def create(shape: Sequence[int], fill_value: float = 0.0, dtype=np.float64) -> Tensor:
    """Return a tensor of ``shape`` with every element equal to ``fill_value``."""
    return np.full(_check_shape(shape), fill_value, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs two matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _check_image(t: Tensor, op: str) -> None:
    if t.ndim != 3:
        raise ShapeError(f"{op} expects a [C, H, W] tensor, got shape {t.shape}")


def crop(t: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    """Contiguous ``h x w`` window starting at ``(top, left)``, all channels kept."""
    _check_image(t, "crop")
    _, H, W = t.shape
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise RangeError(f"Crop window top={top} left={left} h={h} w={w} outside {H}x{W}")
    return t[:, top:top + h, left:left + w].copy()


def mirror_horizontal(t: Tensor) -> Tensor:
    _check_image(t, "mirror_horizontal")
    return t[:, :, ::-1].copy()


def reduce(t: Tensor, op: Union[ReduceOp, str], axis: int) -> Tensor:
    """Collapse ``axis`` with the named statistic. ``argmax`` breaks ties to the lowest index."""
    op = ReduceOp(op)
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"Axis {axis} invalid for rank-{t.ndim} tensor")
    if op is ReduceOp.SUM:
        return np.sum(t, axis=axis)
    if op is ReduceOp.MEAN:
        return np.mean(t, axis=axis)
    if op is ReduceOp.MAX:
        return np.max(t, axis=axis)
    return np.argmax(t, axis=axis)  # first occurrence wins


def flatten(t: Tensor) -> Tensor:
    return np.ascontiguousarray(t).reshape(-1)


### Raw binary format ###

def encode(t: Tensor) -> bytes:
    """Little-endian header (magic, version, rank, u64 dims) followed by float64 data."""
    shape = _check_shape(t.shape)
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, len(shape))
    dims = b"".join(_DIM.pack(d) for d in shape)
    return header + dims + np.ascontiguousarray(t, dtype="<f8").tobytes()


def decode(buffer: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; return it and the offset just past it."""
    try:
        magic, version, rank = _HEADER.unpack_from(buffer, offset)
    except struct.error as e:
        raise FormatError(f"Truncated tensor header at byte {offset}") from e
    if magic != TENSOR_MAGIC:
        raise FormatError(f"Bad tensor magic {magic!r} at byte {offset}")
    if version != TENSOR_VERSION:
        raise FormatError(f"Unsupported tensor format version {version}")
    offset += _HEADER.size
    try:
        shape = tuple(_DIM.unpack_from(buffer, offset + i * _DIM.size)[0] for i in range(rank))
    except struct.error as e:
        raise FormatError("Truncated tensor dimensions") from e
    if rank == 0 or any(d < 1 for d in shape):
        raise FormatError(f"Invalid stored shape {shape}")
    offset += rank * _DIM.size
    count = int(np.prod(shape))
    end = offset + 8 * count
    if end > len(buffer):
        raise FormatError(f"Truncated tensor data: need {end} bytes, have {len(buffer)}")
    data = np.frombuffer(buffer, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(shape), end


def write_tensor(path: PathLike, t: Tensor) -> None:
    Path(path).write_bytes(encode(t))


def read_tensor(path: PathLike) -> Tensor:
    buffer = Path(path).read_bytes()
    t, end = decode(buffer)
    if end != len(buffer):
        raise FormatError(f"{path}: {len(buffer) - end} trailing bytes after tensor")
    return t

"""Dense tensors, sparse delta packets, and their binary file formats.

Dense tensors are plain ``numpy.ndarray`` objects of dtype float32 in C
(row-major) order. Sparse deltas travel as :class:`DeltaPacket`, a sorted
coordinate list over the flattened index space of the target tensor.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import FormatError, RoutingError, ShapeError

DTYPE = np.float32
INDEX_DTYPE = np.int64

TENSOR_MAGIC = b"EVTS"
VIDEO_MAGIC = b"EVTV"
FORMAT_VERSION = 1


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("tensor shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise ShapeError(f"tensor extents must be >= 1, got {shape}")
    return np.full(shape, fill, dtype=DTYPE)


def as_tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce ``values`` to a contiguous float32 array and check it is finite."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ShapeError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class DeltaPacket:
    """Sparse update: strictly increasing flat indices with nonzero deltas.

    Equality compares layer id, frame index and entries; ``size`` is advisory.
    """

    layer_id: str
    indices: np.ndarray
    values: np.ndarray
    frame_index: int = 0
    size: int | None = field(default=None, compare=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=INDEX_DTYPE).reshape(-1)
        val = np.asarray(self.values, dtype=DTYPE).reshape(-1)
        if idx.shape != val.shape:
            raise ShapeError("packet indices and values differ in length")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ShapeError("packet indices must be strictly increasing")
            if idx[0] < 0 or (self.size is not None and idx[-1] >= self.size):
                raise ShapeError(f"packet index out of range for size {self.size}")
            if np.any(val == 0):
                raise ShapeError("packet may not store zero deltas")
        idx.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_unsorted(cls, layer_id: str, indices, values, frame_index: int = 0,
                      size: int | None = None) -> "DeltaPacket":
        """Canonicalize arbitrary (index, delta) pairs: sum duplicates, drop zeros."""
        idx = np.asarray(indices, dtype=INDEX_DTYPE).reshape(-1)
        val = np.asarray(values, dtype=DTYPE).reshape(-1)
        if idx.size:
            uniq, inverse = np.unique(idx, return_inverse=True)
            summed = np.zeros(uniq.shape, dtype=DTYPE)
            np.add.at(summed, inverse, val)
            keep = summed != 0
            idx, val = uniq[keep], summed[keep]
        return cls(layer_id, idx, val, frame_index, size)

    @classmethod
    def empty(cls, layer_id: str, frame_index: int = 0, size: int | None = None) -> "DeltaPacket":
        return cls(layer_id, np.empty(0, INDEX_DTYPE), np.empty(0, DTYPE), frame_index, size)

    def __eq__(self, other):
        if not isinstance(other, DeltaPacket):
            return NotImplemented
        return (self.layer_id == other.layer_id and self.frame_index == other.frame_index
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    __hash__ = None

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.indices, self.values)]

    def __len__(self) -> int:
        return int(self.indices.size)

    def materialize(self, shape: Sequence[int]) -> np.ndarray:
        out = np.zeros(int(np.prod(shape)), dtype=DTYPE)
        out[self.indices] = self.values
        return out.reshape(tuple(shape))

    def apply_to(self, tensor: np.ndarray) -> np.ndarray:
        out = np.array(tensor, dtype=DTYPE, copy=True)
        flat = out.reshape(-1)
        flat[self.indices] += self.values
        return out


def delta_from_diff(before: np.ndarray, after: np.ndarray, eps: float = 0.0,
                    layer_id: str = "", frame_index: int = 0) -> DeltaPacket:
    before = np.asarray(before, dtype=DTYPE)
    after = np.asarray(after, dtype=DTYPE)
    if before.shape != after.shape:
        raise ShapeError(f"shape mismatch {before.shape} vs {after.shape}")
    if eps < 0:
        raise ShapeError("eps must be non-negative")
    diff = (after - before).reshape(-1)
    idx = np.flatnonzero((np.abs(diff) > eps) & (diff != 0))
    return DeltaPacket(layer_id, idx, diff[idx], frame_index, diff.size)


def delta_merge(a: DeltaPacket, b: DeltaPacket) -> DeltaPacket:
    if a.layer_id != b.layer_id:
        raise RoutingError(f"cannot merge packets for {a.layer_id!r} and {b.layer_id!r}")
    if a.frame_index != b.frame_index:
        raise RoutingError(f"cannot merge packets from frames {a.frame_index} and {b.frame_index}")
    size = a.size if a.size is not None else b.size
    return DeltaPacket.from_unsorted(
        a.layer_id,
        np.concatenate([a.indices, b.indices]),
        np.concatenate([a.values, b.values]),
        a.frame_index,
        size,
    )


# -- binary formats -----------------------------------------------------------

def _write_record(fh: BinaryIO, tensor: np.ndarray) -> None:
    arr = as_tensor(tensor)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("unexpected end of file")
    return data


def _read_record(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if rank < 1:
        raise FormatError("tensor rank must be >= 1")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape))
    values = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return as_tensor(values.astype(DTYPE), shape)


def tensor_to_bytes(tensor: np.ndarray) -> bytes:
    buf = io.BytesIO()
    _write_record(buf, tensor)
    return buf.getvalue()


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    with open(path, "wb") as fh:
        _write_record(fh, tensor)


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = _read_record(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes in {path}")
    return arr


def write_video(path: str | Path, frames: Iterable[np.ndarray]) -> None:
    frames = [as_tensor(f) for f in frames]
    if frames and any(f.shape != frames[0].shape for f in frames):
        raise ShapeError("video frames must share one shape")
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(frames)))
        for frame in frames:
            _write_record(fh, frame)


def read_video(path: str | Path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != VIDEO_MAGIC:
            raise FormatError("bad video magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported video version {version}")
        frames = [_read_record(fh) for _ in range(count)]
        if fh.read(1):
            raise FormatError(f"trailing bytes in {path}")
    if frames and any(f.shape != frames[0].shape for f in frames):
        raise ShapeError("video frames must share one shape")
    return frames

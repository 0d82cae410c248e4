"""Semantic voxel grids and the ``.sgrid`` file format.

Labels are held as a ``(h, w, d)`` uint8 array indexed ``[x, y, z]``.  The
on-disk order is x-fastest, i.e. linear index ``x + h * (y + w * z)``, which is
numpy's Fortran order for that array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAGIC = b"SGRD"
VERSION = 1
FLAG_RLE = 0x1
_HEADER = struct.Struct("<4sHHIIIHH")


class GridFormatError(ValueError):
    """Raised for malformed or inconsistent ``.sgrid`` payloads."""


@dataclass(frozen=True)
class SemanticGrid:
    labels: np.ndarray
    num_classes: int
    # payload encoding remembered from the source file; not part of equality
    rle: bool = False

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3-D (h, w, d), got shape {labels.shape}")
        if min(labels.shape) < 1:
            raise ValueError(f"grid dims must be >= 1, got {labels.shape}")
        if not 2 <= self.num_classes <= 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}), "
                f"found range [{labels.min()}, {labels.max()}]"
            )
        labels = np.array(labels, dtype=np.uint8, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def num_voxels(self) -> int:
        return int(self.labels.size)

    def with_labels(self, labels: np.ndarray) -> "SemanticGrid":
        return SemanticGrid(labels, self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, SemanticGrid):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(
            self.labels, other.labels
        )

    __hash__ = None


@dataclass(frozen=True)
class LabelSpec:
    names: tuple[str, ...]
    ignore_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("a label spec needs at least two classes")
        if not 0 <= self.ignore_index < len(self.names):
            raise ValueError(f"ignore_index {self.ignore_index} out of range")

    @property
    def num_classes(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ScaleSpec:
    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"scale dims must be three positive ints, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    def __iter__(self):
        return iter(self.dims)


def check_monotone(scales: Sequence[ScaleSpec]) -> None:
    for lo, hi in zip(scales, scales[1:]):
        if any(b < a for a, b in zip(lo.dims, hi.dims)):
            raise ValueError(f"scale {hi.dims} is smaller than its predecessor {lo.dims}")


def new_grid(dims, num_classes: int, fill_label: int = 0) -> SemanticGrid:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"grid dims must be three positive ints, got {dims}")
    if not 0 <= fill_label < num_classes:
        raise ValueError(f"fill_label {fill_label} not in [0, {num_classes})")
    return SemanticGrid(np.full(dims, fill_label, dtype=np.uint8), num_classes)


def to_linear(grid: SemanticGrid) -> np.ndarray:
    """Labels flattened in file order (x fastest)."""
    return grid.labels.ravel(order="F")


def from_linear(values: np.ndarray, dims, num_classes: int) -> SemanticGrid:
    return SemanticGrid(np.asarray(values).reshape(tuple(dims), order="F"), num_classes)


def _encode_rle(flat: np.ndarray) -> bytes:
    if flat.size == 0:
        return b""
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    counts = np.diff(np.concatenate([starts, [flat.size]]))
    rec = np.zeros(starts.size, dtype=[("count", "<u4"), ("label", "u1")])
    rec["count"] = counts
    rec["label"] = flat[starts]
    return rec.tobytes()


def write_sgrid(grid: SemanticGrid, rle: bool | None = None) -> bytes:
    if rle is None:
        rle = grid.rle
    h, w, d = grid.dims
    flags = FLAG_RLE if rle else 0
    header = _HEADER.pack(MAGIC, VERSION, flags, h, w, d, grid.num_classes, 0)
    flat = to_linear(grid)
    payload = _encode_rle(flat) if rle else flat.tobytes()
    return header + payload


def read_sgrid(data: bytes) -> SemanticGrid:
    if len(data) < _HEADER.size:
        raise GridFormatError("truncated header")
    magic, version, flags, h, w, d, k, reserved = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise GridFormatError(f"unsupported version {version}")
    if flags & ~FLAG_RLE or reserved != 0:
        raise GridFormatError("unknown flags or non-zero reserved field")
    if min(h, w, d) < 1 or not 2 <= k <= 256:
        raise GridFormatError(f"invalid header dims {(h, w, d)} / K={k}")
    n = h * w * d
    body = memoryview(data)[_HEADER.size:]
    if flags & FLAG_RLE:
        if len(body) % 5:
            raise GridFormatError("RLE payload is not a whole number of runs")
        rec = np.frombuffer(body, dtype=[("count", "<u4"), ("label", "u1")])
        counts = rec["count"].astype(np.int64)
        if counts.sum() != n or (counts == 0).any():
            raise GridFormatError(f"RLE runs cover {counts.sum()} voxels, expected {n}")
        if len(rec) > 1 and (rec["label"][1:] == rec["label"][:-1]).any():
            # adjacent equal runs would not survive a re-encode byte-exactly
            raise GridFormatError("RLE payload has non-maximal runs")
        flat = np.repeat(rec["label"], counts)
    else:
        if len(body) != n:
            raise GridFormatError(f"payload has {len(body)} bytes, expected {n}")
        flat = np.frombuffer(body, dtype=np.uint8)
    if flat.size and flat.max() >= k:
        raise GridFormatError(f"label {int(flat.max())} >= K={k}")
    grid = from_linear(flat, (h, w, d), k)
    return SemanticGrid(grid.labels, k, rle=bool(flags & FLAG_RLE))


def load_sgrid(path) -> SemanticGrid:
    with open(path, "rb") as fh:
        return read_sgrid(fh.read())


def save_sgrid(grid: SemanticGrid, path, rle: bool | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(write_sgrid(grid, rle=rle))


def one_hot(grid: SemanticGrid, dtype=np.float64) -> np.ndarray:
    """``(h, w, d, K)`` one-hot expansion."""
    return np.eye(grid.num_classes, dtype=dtype)[grid.labels]


def argmax_labels(probs: np.ndarray) -> SemanticGrid:
    """Inverse of :func:`one_hot` on the last axis; ties go to the lowest class."""
    probs = np.asarray(probs)
    if probs.ndim != 4:
        raise ValueError(f"expected (h, w, d, K) volume, got shape {probs.shape}")
    return SemanticGrid(np.argmax(probs, axis=-1).astype(np.uint8), probs.shape[-1])

"""Overlapping tilings: scene subdivision, voting fusion and infinite scenes.

Tiles split the horizontal plane (x, y) and span the full height.  Tile ``i`` is
generated after every tile ``j < i`` and sees their labels on the overlap
``Delta_ij`` through ``K`` extra condition channels: one-hot where a
predecessor has already decided the voxel, uniform ``1/K`` elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import SemanticGrid
from .pyramid import (
    PyramidModels,
    ScenePyramid,
    saf_upsample_labels,
    sample_scale,
)
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class Tile:
    origin: tuple[int, int, int]
    dims: tuple[int, int, int]

    def slices(self):
        return tuple(slice(o, o + n) for o, n in zip(self.origin, self.dims))


@dataclass(frozen=True)
class TileLayout:
    parent_dims: tuple[int, int, int]
    tiles: tuple[Tile, ...]
    grid_shape: tuple[int, int] = (1, 1)
    overlap_ratio: float = 0.0

    def __post_init__(self):
        cover = np.zeros(self.parent_dims, dtype=bool)
        for tile in self.tiles:
            if any(o < 0 or o + n > p for o, n, p in zip(tile.origin, tile.dims, self.parent_dims)):
                raise ValueError(f"tile {tile} leaves the parent {self.parent_dims}")
            cover[tile.slices()] = True
        if not cover.all():
            raise ValueError("tiles do not cover the parent scene")

    def __len__(self):
        return len(self.tiles)

    def overlap_mask(self, i: int, j: int) -> np.ndarray:
        """``Delta_ij``: voxels of tile ``i`` (local coordinates) also in tile ``j``."""
        a, b = self.tiles[i], self.tiles[j]
        mask = np.zeros(a.dims, dtype=bool)
        lo = [max(oa, ob) for oa, ob in zip(a.origin, b.origin)]
        hi = [min(oa + na, ob + nb) for oa, na, ob, nb in zip(a.origin, a.dims, b.origin, b.dims)]
        if i != j and all(h > l for l, h in zip(lo, hi)):
            mask[tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, a.origin))] = True
        return mask

    def predecessor_mask(self, i: int) -> np.ndarray:
        mask = np.zeros(self.tiles[i].dims, dtype=bool)
        for j in range(i):
            mask |= self.overlap_mask(i, j)
        return mask


def _axis_origins(length: int, size: int, count: int) -> list[int]:
    if count == 1:
        return [0]
    return [round(k * (length - size) / (count - 1)) for k in range(count)]


def tile_size(length: int, parts: int, overlap_ratio: float) -> int:
    """``ceil((1 + delta) * length / parts)``, capped at ``length``."""
    # rounding guards against binary noise turning 136.0 into 136.00000000000003
    return min(length, math.ceil(round((1.0 + overlap_ratio) * length / parts, 9)))


def make_layout(parent_dims, rows: int = 2, cols: int = 2, overlap_ratio: float = 0.0625) -> TileLayout:
    h, w, d = (int(v) for v in parent_dims)
    if not 0 <= overlap_ratio < 1:
        raise ValueError("overlap_ratio must lie in [0, 1)")
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    th, tw = tile_size(h, rows, overlap_ratio), tile_size(w, cols, overlap_ratio)
    tiles = tuple(
        Tile((ox, oy, 0), (th, tw, d))
        for ox in _axis_origins(h, th, rows)
        for oy in _axis_origins(w, tw, cols)
    )
    return TileLayout((h, w, d), tiles, (rows, cols), overlap_ratio)


def split(grid: SemanticGrid, layout: TileLayout) -> list[SemanticGrid]:
    if grid.dims != tuple(layout.parent_dims):
        raise ValueError(f"grid {grid.dims} does not match layout parent {layout.parent_dims}")
    return [grid.with_labels(grid.labels[t.slices()]) for t in layout.tiles]


def fuse_labels(tile_labels: Sequence[np.ndarray], layout: TileLayout, K: int, upto: int | None = None):
    """Majority vote of ``tile_labels[:upto]``; ties go to the lowest tile index.

    Returns ``(labels, covered)`` over the parent; uncovered voxels are 0.
    """
    n = len(tile_labels) if upto is None else upto
    shape = tuple(layout.parent_dims)
    counts = np.zeros(shape + (K,), dtype=np.int32)
    first = np.full(shape + (K,), np.iinfo(np.int32).max, dtype=np.int32)
    for i in range(n):
        tile = layout.tiles[i]
        labels = np.asarray(tile_labels[i])
        if labels.shape != tile.dims:
            raise ValueError(f"sub-scene {i} has dims {labels.shape}, expected {tile.dims}")
        sl = tile.slices()
        onehot = np.eye(K, dtype=bool)[labels]
        counts[sl] += onehot
        first[sl] = np.where(onehot, np.minimum(first[sl], i), first[sl])
    best = counts.max(axis=-1, keepdims=True)
    # among the labels with the top count, the one seen in the earliest tile wins
    rank = np.where(counts == best, first, np.iinfo(np.int32).max)
    out = rank.argmin(axis=-1).astype(np.uint8)
    covered = best[..., 0] > 0
    return np.where(covered, out, 0).astype(np.uint8), covered


def fuse(sub_scenes: Sequence[SemanticGrid], layout: TileLayout) -> SemanticGrid:
    if len(sub_scenes) != len(layout):
        raise ValueError(f"{len(sub_scenes)} sub-scenes for {len(layout)} tiles")
    K = sub_scenes[0].num_classes
    labels, _ = fuse_labels([s.labels for s in sub_scenes], layout, K)
    return SemanticGrid(labels, K)


def overlap_condition(done: Sequence[np.ndarray], layout: TileLayout, i: int, K: int) -> np.ndarray:
    """``(K, *tile_dims)`` overlap channels for tile ``i`` given tiles ``0..i-1``."""
    tile = layout.tiles[i]
    cond = np.full((K,) + tile.dims, 1.0 / K)
    if i == 0:
        return cond
    fused, covered = fuse_labels(done, layout, K, upto=i)
    local = fused[tile.slices()]
    known = covered[tile.slices()] & layout.predecessor_mask(i)
    onehot = np.moveaxis(np.eye(K)[local], -1, 0)
    return np.where(known[None], onehot, cond)


ConditionTrace = Callable[[int, np.ndarray, np.ndarray], None]


def generate_subdivided(
    model,
    schedule: NoiseSchedule,
    coarse_condition_grid: SemanticGrid | None,
    layout: TileLayout,
    seed,
    condition: np.ndarray | None = None,
    saf_mode: str = "trilinear",
    deterministic: bool = False,
    key=(),
    origin=(0, 0, 0),
    trace: ConditionTrace | None = None,
) -> SemanticGrid:
    """Generate tiles autoregressively and fuse them.

    The coarse condition is either a coarse grid (upsampled to the parent with
    the SAF, then cropped per tile) or a precomputed parent-sized ``condition``
    of shape ``(C, h, w, d)``.  ``trace(i, overlap_channels, known_mask)`` is
    called before each tile is sampled.
    """
    K = model.num_classes
    parent = tuple(layout.parent_dims)
    if coarse_condition_grid is not None:
        condition = saf_upsample_labels(coarse_condition_grid.labels, K, parent, saf_mode)
    if condition is not None and condition.shape[1:] != parent:
        raise ValueError(f"condition {condition.shape} does not match layout parent {parent}")
    width = K + (0 if condition is None else condition.shape[0])
    if model.condition_channels != width:
        raise ValueError(
            f"subdivision model needs {width} condition channels, has {model.condition_channels}"
        )
    done: list[np.ndarray] = []
    for i, tile in enumerate(layout.tiles):
        overlap = overlap_condition(done, layout, i, K)
        if trace is not None:
            trace(i, overlap, layout.predecessor_mask(i))
        parts = [] if condition is None else [condition[(slice(None),) + tile.slices()]]
        cond = np.concatenate(parts + [overlap], axis=0)[None]
        tile_origin = np.add(origin, tile.origin)
        labels = sample_scale(
            model, schedule, tile.dims, [seed], cond, tuple(key) + (i,), deterministic, tile_origin
        )
        done.append(labels[0])
    fused, _ = fuse_labels(done, layout, K)
    return SemanticGrid(fused, K)


# -- infinite scenes -------------------------------------------------------------


def strip_width(dim: int, overlap_ratio: float) -> int:
    width = overlap_ratio * dim
    if abs(width - round(width)) > 1e-9:
        raise ValueError(f"overlap {overlap_ratio} x {dim} is not a whole number of voxels")
    return int(round(width))


def canvas_layout(tile_dims, extent, overlap_ratio: float) -> TileLayout:
    """Raster tiling where neighbours share a strip of ``overlap_ratio * dim`` voxels."""
    rows, cols = extent
    if rows < 1 or cols < 1:
        raise ValueError("extent must be at least 1 x 1 tiles")
    h, w, d = tile_dims
    sx, sy = strip_width(h, overlap_ratio), strip_width(w, overlap_ratio)
    if sx >= h or sy >= w:
        raise ValueError("strips must be narrower than a tile")
    parent = (rows * (h - sx) + sx, cols * (w - sy) + sy, d)
    tiles = tuple(
        Tile((r * (h - sx), c * (w - sy), 0), (h, w, d)) for r in range(rows) for c in range(cols)
    )
    return TileLayout(parent, tiles, (rows, cols), overlap_ratio)


def generate_infinite(
    models: PyramidModels,
    pyramid: ScenePyramid,
    schedule: NoiseSchedule,
    extent,
    seed,
    overlap_ratio: float = 0.0625,
    deterministic: bool = False,
    trace: Callable[[int, int, np.ndarray, np.ndarray], None] | None = None,
    keep_intermediates: bool = False,
):
    """Unbounded scene built from a raster of tiles at every pyramid scale.

    The coarsest canvas is produced first, tile by tile, each tile conditioned
    on the strips its west and north neighbours already fixed.  Every finer
    scale then revisits the same raster: a tile is conditioned on the SAF of
    the coarse canvas under it and on the fine strips of its neighbours.
    ``trace(level, tile, overlap_channels, known_mask)`` observes each
    condition as it is assembled.
    """
    K = models.validate(pyramid)
    for level, model in enumerate(models.models):
        need = K if level == 0 else 2 * K
        if model.condition_channels != need:
            raise ValueError(f"scale {level + 1} model needs {need} condition channels")
    canvases = []
    prev_layout = prev_canvas = None
    for level, scale in enumerate(pyramid.scales, start=1):
        layout = canvas_layout(scale.dims, extent, overlap_ratio)
        if prev_canvas is not None:
            ratio = [a // b for a, b in zip(layout.parent_dims, prev_layout.parent_dims)]
            if any(a != b * r for a, b, r in zip(layout.parent_dims, prev_layout.parent_dims, ratio)):
                raise ValueError("pyramid scales and overlap give misaligned canvases")
        tiles_done: list[np.ndarray] = []
        model = models[level - 1]
        for i, tile in enumerate(layout.tiles):
            overlap = overlap_condition(tiles_done, layout, i, K)
            if trace is not None:
                trace(level, i, overlap, layout.predecessor_mask(i))
            parts = []
            if prev_canvas is not None:
                ptile = prev_layout.tiles[i]
                coarse = prev_canvas[ptile.slices()]
                parts.append(saf_upsample_labels(coarse, K, tile.dims, pyramid.saf_mode))
            cond = np.concatenate(parts + [overlap], axis=0)[None]
            labels = sample_scale(
                model, schedule, tile.dims, [seed], cond, (level, i), deterministic, tile.origin
            )
            tiles_done.append(labels[0])
        canvas, _ = fuse_labels(tiles_done, layout, K)
        canvases.append(SemanticGrid(canvas, K))
        prev_layout, prev_canvas = layout, canvas
    return canvases if keep_intermediates else canvases[-1]

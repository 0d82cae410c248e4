"""Point-cloud and per-slice exports of semantic grids."""

from __future__ import annotations

import csv

import numpy as np

from .grid import SemanticGrid

# CarlaSC-style colours for the first eleven classes; higher ids get a fixed hash colour
BASE_PALETTE = np.array(
    [
        (0, 0, 0),        # unclassified / empty
        (70, 70, 70),     # building
        (190, 153, 153),  # fences
        (160, 160, 160),  # other
        (220, 20, 60),    # pedestrian
        (153, 153, 153),  # pole
        (128, 64, 128),   # road
        (81, 0, 81),      # ground
        (244, 35, 232),   # sidewalk
        (107, 142, 35),   # vegetation
        (0, 0, 142),      # vehicle
    ],
    dtype=np.uint8,
)


def palette(num_classes: int) -> np.ndarray:
    """``(K, 3)`` uint8 colours, identical for every call with the same ``K``."""
    if num_classes <= len(BASE_PALETTE):
        return BASE_PALETTE[:num_classes].copy()
    extra = np.arange(len(BASE_PALETTE), num_classes, dtype=np.uint64)
    mix = (extra * np.uint64(2654435761)) & np.uint64(0xFFFFFF)
    rgb = np.stack([(mix >> np.uint64(s)) & np.uint64(0xFF) for s in (16, 8, 0)], axis=1)
    return np.concatenate([BASE_PALETTE, rgb.astype(np.uint8)])


def ply_text(grid: SemanticGrid) -> str:
    """ASCII PLY with one vertex per voxel whose label is not 0."""
    xyz = np.argwhere(grid.labels != 0)
    labels = grid.labels[tuple(xyz.T)]
    colours = palette(grid.num_classes)[labels]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(xyz)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property uchar label",
        "end_header",
    ]
    for (x, y, z), (r, g, b), c in zip(xyz, colours, labels):
        lines.append(f"{x} {y} {z} {r} {g} {b} {c}")
    return "\n".join(lines) + "\n"


def write_ply(grid: SemanticGrid, path) -> int:
    """Write the PLY; returns the vertex count."""
    text = ply_text(grid)
    with open(path, "w") as fh:
        fh.write(text)
    return int((grid.labels != 0).sum())


def slice_counts(grid: SemanticGrid) -> np.ndarray:
    """``(d, K)`` voxel count of each class in each z-slice."""
    K = grid.num_classes
    return np.stack([np.bincount(grid.labels[:, :, z].ravel(), minlength=K) for z in range(grid.dims[2])])


def write_slice_csv(grid: SemanticGrid, path) -> None:
    counts = slice_counts(grid)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z"] + [f"class_{k}" for k in range(grid.num_classes)])
        for z, row in enumerate(counts):
            writer.writerow([z] + row.tolist())

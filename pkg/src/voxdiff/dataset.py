"""Label remapping, height cropping, raw-volume import and procedural toy scenes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import poisson

from .diffusion import stream
from .grid import LabelSpec, SemanticGrid

REMOVE = "remove"
EXCLUDE = "exclude"
PRESETS = ("carla-merge", "kitti-to-carla")


@dataclass(frozen=True)
class LabelRemap:
    """Raw id -> target id, ``REMOVE`` or ``EXCLUDE``; both markers become class 0.

    ``EXCLUDE`` rows are classes left out of segmentation scoring; with
    ``exclude_in_metrics`` their voxels can also be masked by the metric layer.
    """

    table: dict
    target: LabelSpec
    name: str = "custom"
    version: int = 1
    exclude_in_metrics: bool = False
    raw_names: dict = field(default_factory=dict)

    def __post_init__(self):
        K = len(self.target.names)
        for raw, to in self.table.items():
            if to in (REMOVE, EXCLUDE):
                continue
            if not isinstance(to, int) or not 0 <= to < K:
                raise ValueError(f"raw label {raw} maps to {to!r}, outside [0, {K})")

    @property
    def num_classes(self) -> int:
        return len(self.target.names)

    def lookup(self, raw: int):
        return self.table[int(raw)]

    def _lut(self, max_raw: int):
        lut = np.full(max_raw + 1, -1, dtype=np.int64)
        excl = np.zeros(max_raw + 1, dtype=bool)
        for raw, to in self.table.items():
            if raw <= max_raw:
                lut[raw] = 0 if to in (REMOVE, EXCLUDE) else to
                excl[raw] = to == EXCLUDE
        return lut, excl

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Remap an integer array of raw ids to uint8 target labels."""
        raw = np.asarray(raw)
        if raw.size == 0:
            return raw.astype(np.uint8)
        if raw.min() < 0:
            raise ValueError(f"negative raw label {int(raw.min())}")
        lut, _ = self._lut(int(raw.max()))
        out = lut[raw]
        if (out < 0).any():
            missing = sorted(int(v) for v in np.unique(raw[out < 0]))
            raise ValueError(f"raw labels without a mapping: {missing}")
        return out.astype(np.uint8)

    def excluded_mask(self, raw: np.ndarray) -> np.ndarray:
        """Voxels whose raw class is an ``EXCLUDE`` row."""
        raw = np.asarray(raw)
        if raw.size == 0:
            return np.zeros(raw.shape, dtype=bool)
        _, excl = self._lut(int(raw.max()))
        return excl[raw]

    @classmethod
    def from_json(cls, data: dict) -> "LabelRemap":
        target = LabelSpec(tuple(data["target"]["names"]), data["target"].get("ignore_index", 0))
        table, names = {}, {}
        for row in data["rows"]:
            raw = int(row["raw"])
            if raw in table:
                raise ValueError(f"duplicate raw label {raw} in remap table")
            to = row["to"]
            table[raw] = to if to in (REMOVE, EXCLUDE) else int(to)
            if "name" in row:
                names[raw] = row["name"]
        return cls(table, target, data.get("name", "custom"), int(data.get("version", 1)),
                   bool(data.get("exclude_in_metrics", False)), names)


def load_preset(name: str) -> LabelRemap:
    """One of :data:`PRESETS`, or a path to a JSON table in the same format."""
    if name in PRESETS:
        text = resources.files("voxdiff").joinpath("presets", f"{name}.json").read_text()
    else:
        path = Path(name)
        if not path.exists():
            raise FileNotFoundError(f"unknown remap preset {name!r}")
        text = path.read_text()
    return LabelRemap.from_json(json.loads(text))


def remap(grid, label_remap: LabelRemap) -> SemanticGrid:
    """Rewrite labels of a grid (or a raw ``(h, w, d)`` id array)."""
    raw = grid.labels if isinstance(grid, SemanticGrid) else np.asarray(grid)
    return SemanticGrid(label_remap.apply(raw), label_remap.num_classes)


def height_crop(grid: SemanticGrid, keep_layers: int) -> SemanticGrid:
    """Keep the bottom ``keep_layers`` z-slices."""
    d = grid.dims[2]
    if not 1 <= keep_layers <= d:
        raise ValueError(f"keep_layers must be in [1, {d}], got {keep_layers}")
    return grid.with_labels(grid.labels[:, :, :keep_layers])


def import_raw(path, dims, num_classes: int, dtype="u1", label_remap: LabelRemap | None = None) -> SemanticGrid:
    """Read a headerless label volume in x-fastest order.

    ``dtype`` is the little-endian element type of the file (``u1`` or ``u2``).
    """
    dims = tuple(int(v) for v in dims)
    data = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: {data.size} labels for dims {dims} ({int(np.prod(dims))} expected)")
    raw = data.reshape(dims, order="F")
    labels = label_remap.apply(raw) if label_remap is not None else raw
    if labels.size and int(labels.max()) >= num_classes:
        raise ValueError(f"{path}: label {int(labels.max())} is not below K={num_classes}")
    return SemanticGrid(labels, num_classes)


# -- toy scenes -----------------------------------------------------------------

TOY_NAMES = ("empty", "building", "road", "ground", "vehicle", "pole")
PRIMITIVES = ("ground", "road", "building", "vehicle", "pole")


def toy_class_ids(K: int) -> dict[str, int]:
    """Class index per primitive: compact ids for K = 6, merged-CarlaSC ids for K >= 11."""
    if K >= 11:
        return {"empty": 0, "building": 1, "road": 6, "ground": 7, "vehicle": 10, "pole": 5}
    if K >= 6:
        return {name: i for i, name in enumerate(TOY_NAMES)}
    raise ValueError("toy scenes need K >= 6")


@dataclass(frozen=True)
class ToySceneConfig:
    """Procedural street scenes.

    Densities are expected primitive counts per 16 x 16 footprint (``ground`` is
    the probability that a column carries ground).  ``ground_layers`` is the
    thickness of the ground/road slab; objects stand on top of it.  ``shift``
    multiplies individual densities, which is how a shifted target distribution
    is made.
    """

    dims: tuple[int, int, int] = (16, 16, 4)
    num_classes: int = 6
    seed: int = 0
    ground: float = 1.0
    road: float = 1.0
    building: float = 1.5
    vehicle: float = 2.0
    pole: float = 2.0
    shift: dict = field(default_factory=dict)
    ground_layers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        h, w, d = self.dims
        if h < 4 or w < 4 or d < 2:
            raise ValueError(f"toy scenes need at least 4 x 4 x 2 voxels, got {self.dims}")
        toy_class_ids(self.num_classes)
        if not 1 <= self.ground_layers < d:
            raise ValueError(f"ground_layers must be in [1, {d - 1}]")
        if not 0 <= self.ground <= 1:
            raise ValueError("ground density is a probability")
        for name in PRIMITIVES:
            if self.density(name) < 0:
                raise ValueError(f"{name} density must be >= 0")
        unknown = set(self.shift) - set(PRIMITIVES)
        if unknown:
            raise ValueError(f"unknown shift keys {sorted(unknown)}")

    def density(self, name: str) -> float:
        return float(getattr(self, name)) * float(self.shift.get(name, 1.0))

    def shifted(self, **multipliers) -> "ToySceneConfig":
        return replace(self, shift={**self.shift, **multipliers})


def _count(rng, lam: float) -> int:
    # inverse CDF on one uniform keeps counts monotone in the density for a fixed stream
    return int(poisson.ppf(rng.random(), lam)) if lam > 0 else 0


def _toy_scene(cfg: ToySceneConfig, index: int) -> np.ndarray:
    h, w, d = cfg.dims
    ids = toy_class_ids(cfg.num_classes)
    area = h * w / 256.0
    labels = np.zeros((h, w, d), dtype=np.uint8)
    key = (cfg.seed, index)
    g = cfg.ground_layers

    rng = stream(*key, 0)
    u = rng.random((h, w))
    ground = u < min(cfg.density("ground"), 1.0)
    if cfg.density("ground") > 0 and not ground.any():
        ground.flat[np.argmin(u)] = True  # a sparse ground still shows up once
    labels[:, :, :g][ground] = ids["ground"]

    rng = stream(*key, 1)
    road = np.zeros((h, w), dtype=bool)
    for _ in range(_count(rng, cfg.density("road") * area)):
        horizontal = rng.integers(2)
        span = h if horizontal else w
        width = int(rng.integers(max(1, span // 8), max(2, span // 5) + 1))
        start = int(rng.integers(0, span - width + 1))
        if horizontal:
            road[start:start + width, :] = True
        else:
            road[:, start:start + width] = True
    labels[:, :, :g][road] = ids["road"]

    rng = stream(*key, 2)
    max_fp = max(2, min(h, w) // 4)
    for _ in range(_count(rng, cfg.density("building") * area)):
        sx, sy = (int(v) for v in rng.integers(2, max_fp + 1, size=2))
        ox, oy = int(rng.integers(0, h - sx + 1)), int(rng.integers(0, w - sy + 1))
        height = int(rng.integers(g + 1, d + 1))
        if road[ox:ox + sx, oy:oy + sy].any():
            continue  # buildings stay off the road
        labels[ox:ox + sx, oy:oy + sy, :height] = ids["building"]

    rng = stream(*key, 3)
    road_xy = np.argwhere(road)
    for _ in range(_count(rng, cfg.density("vehicle") * area)):
        along_x = rng.integers(2)
        pick = int(rng.integers(0, max(len(road_xy), 1)))
        if not len(road_xy):
            continue
        x, y = road_xy[pick]
        sx, sy = (2, 1) if along_x else (1, 2)
        # the box is clipped to the road, which also keeps it inside the scene
        box = np.zeros((h, w), dtype=bool)
        box[x:x + sx, y:y + sy] = True
        labels[:, :, g][box & road] = ids["vehicle"]

    rng = stream(*key, 4)
    for _ in range(_count(rng, cfg.density("pole") * area)):
        x, y = int(rng.integers(0, h)), int(rng.integers(0, w))
        top = int(rng.integers(g + 1, d + 1))
        if road[x, y] or labels[x, y, g] != 0:
            continue
        labels[x, y, g:top] = ids["pole"]
    return labels


def generate_toy_scenes(config: ToySceneConfig, count: int, start: int = 0) -> list[SemanticGrid]:
    """``count`` scenes; scene ``i`` depends only on ``(seed, start + i)`` and the densities."""
    if count < 0:
        raise ValueError("count must be >= 0")
    return [SemanticGrid(_toy_scene(config, start + i), config.num_classes) for i in range(count)]

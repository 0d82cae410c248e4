"""Run configuration: one JSON document with schedule, pyramid, layout, model,
train and eval sections, validated across sections at load time."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import UNetConfig
from .grid import ScaleSpec
from .pyramid import SAF_MODES, ScenePyramid
from .schedule import NoiseSchedule, schedule_from_config
from .subdivision import TileLayout, canvas_layout, make_layout
from .training import TrainConfig

DEFAULTS = {
    "seed": 0,
    "num_classes": 6,
    "schedule": {"T": 100, "betas": "default"},
    "pyramid": {
        "scales": [[8, 8, 2], [16, 16, 4]],
        "saf_mode": "trilinear",
        "start_from_scale": 1,
        "deterministic": False,
    },
    "layout": None,
    "infinite": {"overlap_ratio": 0.25},
    "model": {"base_channels": 16, "depth": 1, "time_embed_dim": 32, "blocks_per_level": 2},
    "train": {"epochs": 10, "batch_size": 8},
    "eval": {"ignore_index": 0, "sigma": None},
    "paths": {"data": "data/train", "checkpoints": "checkpoints"},
}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(data: dict, assignment: str) -> dict:
    """``section.key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(data)
    node = out
    keys = path.split(".")
    for key in keys[:-1]:
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {path}: {key} is not a section")
    node[keys[-1]] = value
    return out


@dataclass
class RunConfig:
    raw: dict
    source: str = "<defaults>"
    schedule: NoiseSchedule = field(init=False)
    pyramid: ScenePyramid = field(init=False)
    model: UNetConfig = field(init=False)
    train: TrainConfig = field(init=False)
    layout: TileLayout | None = field(init=False)

    def __post_init__(self):
        try:
            self._build()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{self.source}: {exc}") from exc

    def _build(self):
        raw = self.raw
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{self.source}: unknown sections {sorted(unknown)}")
        K = int(raw["num_classes"])
        if not 2 <= K <= 256:
            raise ConfigError(f"{self.source}: num_classes must be in [2, 256]")
        self.schedule = schedule_from_config(raw["schedule"])
        pyr = raw["pyramid"]
        if pyr["saf_mode"] not in SAF_MODES:
            raise ConfigError(f"{self.source}: pyramid.saf_mode must be one of {SAF_MODES}")
        self.pyramid = ScenePyramid(tuple(ScaleSpec(tuple(s)) for s in pyr["scales"]), pyr["saf_mode"])
        dims = [s.dims for s in self.pyramid.scales]
        for a, b in zip(dims, dims[1:]):
            if any(hi % lo for lo, hi in zip(a, b)):
                raise ConfigError(f"{self.source}: scale {b} is not an integer multiple of {a}")
        start = int(pyr["start_from_scale"])
        if not 1 <= start <= self.pyramid.levels:
            raise ConfigError(f"{self.source}: start_from_scale must be in [1, {self.pyramid.levels}]")
        self.model = UNetConfig(**raw["model"])
        train = dict(raw["train"])
        train.setdefault("T", self.schedule.T)
        train.setdefault("seed", raw["seed"])
        self.train = TrainConfig.from_dict(train)
        if self.train.T != self.schedule.T:
            raise ConfigError(f"{self.source}: train.T={self.train.T} differs from schedule.T={self.schedule.T}")
        factor = 2**self.model.depth
        for d in dims:
            if any(n % factor for n in d):
                raise ConfigError(f"{self.source}: scale {d} is not divisible by 2^depth = {factor}")
        if self.train.rotate:
            if dims[-1][0] != dims[-1][1]:
                raise ConfigError(f"{self.source}: train.rotate needs square scenes (h == w)")
        self.layout = None
        if raw.get("layout"):
            lay = raw["layout"]
            self.layout = make_layout(dims[-1], lay.get("rows", 2), lay.get("cols", 2), lay.get("overlap_ratio", 0.0625))
            tile = self.layout.tiles[0].dims
            if any(n % factor for n in tile):
                raise ConfigError(f"{self.source}: sub-scene dims {tile} are not divisible by 2^depth = {factor}")
        ratio = float(raw["infinite"]["overlap_ratio"])
        if not 0 <= ratio < 1:
            raise ConfigError(f"{self.source}: infinite.overlap_ratio must lie in [0, 1)")

    @property
    def num_classes(self) -> int:
        return int(self.raw["num_classes"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def start_from_scale(self) -> int:
        return int(self.raw["pyramid"]["start_from_scale"])

    @property
    def deterministic(self) -> bool:
        return bool(self.raw["pyramid"]["deterministic"])

    @property
    def infinite_overlap(self) -> float:
        return float(self.raw["infinite"]["overlap_ratio"])

    def path(self, key: str) -> Path:
        return Path(self.raw["paths"][key])

    def checkpoint_dir(self, infinite: bool = False) -> Path:
        paths = self.raw["paths"]
        if infinite:
            return Path(paths.get("infinite_checkpoints") or Path(paths["checkpoints"]) / "infinite")
        return Path(paths["checkpoints"])

    def condition_channels(self, level: int, infinite: bool = False) -> int:
        """Condition width of the 1-based ``level`` model."""
        K = self.num_classes
        if infinite:
            return K if level == 1 else 2 * K
        width = 0 if level == 1 else K
        if self.layout is not None and level == self.pyramid.levels:
            width += K
        return width

    def infinite_layout(self, level: int, extent) -> TileLayout:
        return canvas_layout(self.pyramid.scales[level - 1].dims, extent, self.infinite_overlap)


def load_config(path=None, overrides=()) -> RunConfig:
    data = DEFAULTS
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read config ({exc.strerror})") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: not valid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{source}: the top level must be an object")
        data = _merge(DEFAULTS, user)
    for item in overrides:
        data = apply_override(data, item)
    return RunConfig(data, source)

"""Scene pyramids: pooling between scales, the scale adaptive function (SAF) and
the coarse-to-fine sampling chain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .denoiser import DenoiserInput, predict_x0_logits
from .diffusion import mixture_posterior, sample_categorical, softmax, stream
from .grid import ScaleSpec, SemanticGrid, check_monotone
from .schedule import NoiseSchedule

SAF_MODES = ("trilinear", "nearest")


@dataclass(frozen=True)
class ScenePyramid:
    scales: tuple[ScaleSpec, ...]
    saf_mode: str = "trilinear"

    def __post_init__(self):
        scales = tuple(s if isinstance(s, ScaleSpec) else ScaleSpec(tuple(s)) for s in self.scales)
        if not scales:
            raise ValueError("a pyramid needs at least one scale")
        check_monotone(scales)
        if self.saf_mode not in SAF_MODES:
            raise ValueError(f"saf_mode must be one of {SAF_MODES}")
        object.__setattr__(self, "scales", scales)

    @property
    def levels(self) -> int:
        return len(self.scales)


def _block_ratio(src, dst):
    ratio = []
    for a, b in zip(src, dst):
        if b < 1 or a % b:
            raise ValueError(f"cannot pool {tuple(src)} to {tuple(dst)}: ratio is not an integer")
        ratio.append(a // b)
    return ratio


def downsample_labels(labels: np.ndarray, K: int, target) -> np.ndarray:
    """Majority pooling of a ``(..., X, Y, Z)`` label array; ties go to the lowest class."""
    *lead, X, Y, Z = labels.shape
    tx, ty, tz = tuple(target)
    rx, ry, rz = _block_ratio((X, Y, Z), (tx, ty, tz))
    blocks = labels.reshape(*lead, tx, rx, ty, ry, tz, rz)
    counts = np.zeros(tuple(lead) + (tx, ty, tz, K), dtype=np.int32)
    for c in range(K):
        counts[..., c] = (blocks == c).sum(axis=(-5, -3, -1))
    return counts.argmax(axis=-1).astype(np.uint8)


def downsample(grid: SemanticGrid, target) -> SemanticGrid:
    return grid.with_labels(downsample_labels(grid.labels, grid.num_classes, tuple(target)))


def _linear_weights(n_src: int, n_dst: int) -> np.ndarray:
    """``(n_dst, n_src)`` interpolation matrix sampling at voxel centres."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    W = np.zeros((n_dst, n_src))
    np.add.at(W, (np.arange(n_dst), lo), 1.0 - frac)
    np.add.at(W, (np.arange(n_dst), hi), frac)
    return W


def saf_upsample_labels(labels: np.ndarray, K: int, target, mode: str = "trilinear") -> np.ndarray:
    """Soft condition volume ``(..., K, X', Y', Z')`` from labels ``(..., X, Y, Z)``."""
    *lead, X, Y, Z = labels.shape
    tx, ty, tz = tuple(target)
    if tx < X or ty < Y or tz < Z:
        raise ValueError(f"SAF target {tuple(target)} is smaller than source {(X, Y, Z)}")
    onehot = np.eye(K)[labels]  # (..., X, Y, Z, K)
    if mode == "nearest":
        ix = (np.arange(tx) * X) // tx
        iy = (np.arange(ty) * Y) // ty
        iz = (np.arange(tz) * Z) // tz
        up = onehot[..., ix, :, :, :][..., :, iy, :, :][..., :, :, iz, :]
    elif mode == "trilinear":
        Wx, Wy, Wz = _linear_weights(X, tx), _linear_weights(Y, ty), _linear_weights(Z, tz)
        up = np.einsum("...xyzk,ax,by,cz->...abck", onehot, Wx, Wy, Wz, optimize=True)
    else:
        raise ValueError(f"unknown SAF mode {mode!r}")
    return np.moveaxis(up, -1, -4)


def saf_upsample(grid: SemanticGrid, target, mode: str = "trilinear") -> np.ndarray:
    """``(h', w', d', K)`` per-voxel class probabilities at the target scale."""
    soft = saf_upsample_labels(grid.labels, grid.num_classes, tuple(target), mode)
    return np.moveaxis(soft, 0, -1)


def build_pyramid(grid: SemanticGrid, pyramid: ScenePyramid) -> list[SemanticGrid]:
    if tuple(pyramid.scales[-1].dims) != grid.dims:
        raise ValueError(f"finest scale {pyramid.scales[-1].dims} differs from the grid {grid.dims}")
    return [downsample(grid, s.dims) for s in pyramid.scales[:-1]] + [grid]


@dataclass
class GenerateOptions:
    deterministic: bool = False
    # 1-based scale to start sampling at; scales below it come from coarse_scene
    start_from_scale: int = 1
    coarse_scene: SemanticGrid | None = None
    # TileLayout for the finest scale, or None for whole-scene sampling
    layout: object | None = None
    keep_intermediates: bool = False


@dataclass
class PyramidModels:
    models: list = field(default_factory=list)

    def __post_init__(self):
        self.models = list(self.models)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, i):
        return self.models[i]

    def validate(self, pyramid: ScenePyramid, start: int = 1) -> int:
        """Check the models used from scale ``start`` on; returns their class count."""
        if len(self.models) != pyramid.levels:
            raise ValueError(f"{len(self.models)} models for {pyramid.levels} scales")
        used = self.models[start - 1:]
        for level, model in enumerate(used, start=start):
            if model is None:
                raise ValueError(f"missing model for scale {level}")
        K = used[0].num_classes
        if any(m.num_classes != K for m in used):
            raise ValueError("all scales must share one class count")
        return K


def reverse_chain_batch(
    predict,
    schedule: NoiseSchedule,
    x_T: np.ndarray,
    K: int,
    seeds: Sequence,
    key=(),
    deterministic: bool = False,
) -> np.ndarray:
    """Batched ``t = T .. 1`` loop; each scene draws from its own seed's streams.

    ``predict(x_t, t)`` maps labels ``(B, X, Y, Z)`` to logits ``(B, K, X, Y, Z)``.
    Scene ``b`` at step ``t`` uses ``stream(seeds[b], *key, t)``, so a scene's
    result does not depend on what else is in the batch.
    """
    x = np.array(x_T, dtype=np.uint8)
    B = x.shape[0]
    for t in range(schedule.T, 0, -1):
        logits = np.moveaxis(predict(x, t), 1, -1).reshape(-1, K)
        probs = mixture_posterior(schedule, t, x.reshape(-1), softmax(logits)).reshape(B, -1, K)
        if deterministic:
            new = probs.argmax(axis=-1)
        else:
            new = np.stack([sample_categorical(probs[b], stream(seeds[b], *key, t)) for b in range(B)])
        x = new.reshape(x.shape).astype(np.uint8)
    return x


def noise_batch(shape, K: int, seeds, key=()) -> np.ndarray:
    return np.stack([stream(s, *key, 0).integers(0, K, size=tuple(shape), dtype=np.uint8) for s in seeds])


def sample_scale(model, schedule, dims, seeds, condition=None, key=(), deterministic=False, origin=None):
    """Full reverse chain for one scale over a batch of scenes (labels out)."""
    K = model.num_classes
    x_T = noise_batch(dims, K, seeds, key)

    def predict(x, t):
        return predict_x0_logits(model, DenoiserInput(x, np.full(x.shape[0], t), condition, origin))

    return reverse_chain_batch(predict, schedule, x_T, K, seeds, key, deterministic)


def generate_many(
    pyramid_models: PyramidModels,
    pyramid: ScenePyramid,
    schedule: NoiseSchedule,
    seeds: Sequence,
    options: GenerateOptions | None = None,
) -> list[list[SemanticGrid]]:
    """Sample one scene per seed; returns per-scale outputs for each scene.

    Scale ``l`` is keyed ``(l,)`` in the random streams.  When a layout is set,
    the finest scale is produced tile by tile through
    :func:`voxdiff.subdivision.generate_subdivided`.
    """
    options = options or GenerateOptions()
    L = pyramid.levels
    start = options.start_from_scale
    if not 1 <= start <= L:
        raise ValueError(f"start_from_scale must be in [1, {L}]")
    K = pyramid_models.validate(pyramid, start)
    seeds = list(seeds)
    outputs: list[list[SemanticGrid]] = [[] for _ in seeds]
    prev = None
    if start > 1:
        coarse = options.coarse_scene
        if coarse is None:
            raise ValueError("start_from_scale > 1 needs a coarse scene")
        if coarse.dims != pyramid.scales[start - 2].dims or coarse.num_classes != K:
            raise ValueError(
                f"coarse scene {coarse.dims} does not match scale {start - 1} {pyramid.scales[start - 2].dims}"
            )
        prev = np.stack([coarse.labels] * len(seeds))
    for level in range(start, L + 1):
        dims = pyramid.scales[level - 1].dims
        model = pyramid_models[level - 1]
        cond = None
        if level > 1:
            cond = saf_upsample_labels(prev, K, dims, pyramid.saf_mode)
        if level == L and options.layout is not None:
            from .subdivision import generate_subdivided

            labels = np.stack([
                generate_subdivided(
                    model, schedule, None, options.layout, seed,
                    condition=None if cond is None else cond[b],
                    deterministic=options.deterministic, key=(level,),
                ).labels
                for b, seed in enumerate(seeds)
            ])
        else:
            if (cond is None) != (model.condition_channels == 0) or (
                cond is not None and cond.shape[1] != model.condition_channels
            ):
                raise ValueError(f"model for scale {level} does not accept its condition")
            labels = sample_scale(model, schedule, dims, seeds, cond, (level,), options.deterministic)
        for b in range(len(seeds)):
            outputs[b].append(SemanticGrid(labels[b], K))
        prev = labels
    if not options.keep_intermediates:
        outputs = [out[-1:] for out in outputs]
    return outputs


def generate(pyramid_models, pyramid, schedule, seed, options: GenerateOptions | None = None):
    """One scene at the finest scale (or all scales with ``keep_intermediates``)."""
    out = generate_many(pyramid_models, pyramid, schedule, [seed], options)[0]
    if options is not None and options.keep_intermediates:
        return out
    return out[-1]

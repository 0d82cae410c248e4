"""Training and fine-tuning of per-scale denoisers.

Each optimisation step draws a batch of scenes, augments them at full
resolution, rebuilds the scale (and its coarse condition) by pooling, picks a
step ``t`` per scene, corrupts, and applies the hybrid loss.  Randomness comes
from counter streams keyed by ``(epoch, step)`` so a run is a pure function of
its seed.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .denoiser import DenoiserInput, UNetDenoiser, load_model
from .diffusion import corrupt, hybrid_loss_and_grad, stream
from .grid import SemanticGrid
from .pyramid import PyramidModels, ScenePyramid, downsample_labels, saf_upsample_labels
from .schedule import NoiseSchedule


class TrainingDiverged(FloatingPointError):
    """Raised when a step produces a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 1
    batch_size: int = 8
    lam: float = 1e-3
    T: int = 100
    flip: bool = True
    rotate: bool = True
    seed: int = 0
    # optional wall-clock cap in seconds; training stops after the step that crosses it
    time_budget: float | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("AdamW betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0 or self.lam < 0:
            raise ValueError("eps must be positive; weight_decay and lam non-negative")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_total: float
    mean_kl: float
    mean_aux: float
    steps: int


@dataclass
class TrainResult:
    model: UNetDenoiser
    curve: list[EpochStats]
    steps: int
    seconds: float


# -- augmentation ---------------------------------------------------------------


def augment_labels(labels: np.ndarray, rng: np.random.Generator, flip: bool = True, rotate: bool = True):
    """Random element of the flip / z-rotation group applied to ``(X, Y, Z)`` labels."""
    if rotate and labels.shape[0] != labels.shape[1]:
        raise ValueError(f"z rotations need h == w, got {labels.shape[:2]}")
    out = labels
    if rotate:
        # rot^k then an optional x flip enumerates all 8 dihedral elements
        out = np.rot90(out, int(rng.integers(4)), axes=(0, 1))
        if flip and rng.integers(2):
            out = out[::-1]
    elif flip:
        if rng.integers(2):
            out = out[::-1]
        if rng.integers(2):
            out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(grid: SemanticGrid, rng: np.random.Generator, flip: bool = True, rotate: bool = True):
    return grid.with_labels(augment_labels(grid.labels, rng, flip, rotate))


# -- optimiser ------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay: ``p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, params: dict[str, ad.Tensor], lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            dtype = p.data.dtype
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * dtype.type(1.0 - self.lr * self.weight_decay) - dtype.type(self.lr) * update).astype(dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- loss wiring ----------------------------------------------------------------


def hybrid_loss_node(logits: ad.Tensor, schedule: NoiseSchedule, t: np.ndarray, x0: np.ndarray, x_t: np.ndarray, lam: float):
    """Scalar hybrid-loss tensor on the tape plus its :class:`LossBreakdown`.

    ``logits`` is ``(B, K, X, Y, Z)``; ``t`` holds one step per scene.
    """
    B, K = logits.shape[:2]
    if not np.all(np.isfinite(logits.data)):
        raise TrainingDiverged("denoiser produced non-finite logits")
    flat = np.moveaxis(logits.data, 1, -1).reshape(-1, K).astype(np.float64)
    per_voxel_t = np.repeat(np.asarray(t, dtype=np.int64), int(np.prod(logits.shape[2:])))
    breakdown, grad = hybrid_loss_and_grad(schedule, per_voxel_t, x0.reshape(-1), x_t.reshape(-1), flat, lam)
    total = breakdown.total
    if not np.isfinite(total):
        raise TrainingDiverged("hybrid loss is not finite")
    grad = np.moveaxis(grad.reshape((B,) + logits.shape[2:] + (K,)), -1, 1).astype(logits.data.dtype)
    node = ad.function(np.asarray(total, dtype=logits.data.dtype), [logits], lambda g: (g * grad,))
    return node, breakdown


def batch_loss(model, schedule, x0, x_t, t, condition, lam):
    """Forward the model on a batch and build the loss node."""
    logits = model.forward(DenoiserInput(x_t, t, condition))
    return hybrid_loss_node(logits, schedule, t, x0, x_t, lam)


# -- batches --------------------------------------------------------------------


@dataclass
class ScaleData:
    """How a scale's training pairs are derived from full-resolution scenes.

    ``scale_dims`` is the model's scale (``None`` keeps the scene size),
    ``coarse_dims`` the previous pyramid scale whose SAF output is the
    condition, and ``crop_dims`` a random crop taken after conditioning (used
    for sub-scene models).  ``overlap_ratio`` sets the width of the edge strips
    revealed through the overlap channels of sub-scene models.
    """

    scale_dims: tuple[int, int, int] | None = None
    coarse_dims: tuple[int, int, int] | None = None
    crop_dims: tuple[int, int, int] | None = None
    saf_mode: str = "trilinear"
    overlap_ratio: float = 0.0625


def _overlap_channels(x0: np.ndarray, K: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Reveal the west and/or north edge strips (each with probability 1/2)."""
    X, Y, _ = x0.shape
    cond = np.full((K,) + x0.shape, 1.0 / K)
    known = np.zeros(x0.shape, dtype=bool)
    sx, sy = max(1, int(round(ratio * X))), max(1, int(round(ratio * Y)))
    if rng.integers(2):
        known[:sx] = True
    if rng.integers(2):
        known[:, :sy] = True
    onehot = np.moveaxis(np.eye(K)[x0], -1, 0)
    return np.where(known[None], onehot, cond)


def make_batch(scenes: Sequence[np.ndarray], K: int, data: ScaleData, cond_channels: int, cfg: TrainConfig, rng):
    """Augment, pool, condition and crop one batch; returns ``(x0, condition)``."""
    x0s, conds = [], []
    for labels in scenes:
        labels = augment_labels(labels, rng, cfg.flip, cfg.rotate) if (cfg.flip or cfg.rotate) else labels
        x0 = labels if data.scale_dims is None else downsample_labels(labels, K, data.scale_dims)
        parts = []
        if data.coarse_dims is not None:
            coarse = downsample_labels(labels, K, data.coarse_dims)
            parts.append(saf_upsample_labels(coarse, K, x0.shape, data.saf_mode))
        if data.crop_dims is not None and tuple(data.crop_dims) != x0.shape:
            ox = [int(rng.integers(0, n - c + 1)) for n, c in zip(x0.shape, data.crop_dims)]
            sl = tuple(slice(o, o + c) for o, c in zip(ox, data.crop_dims))
            x0 = x0[sl]
            parts = [p[(slice(None),) + sl] for p in parts]
        width = sum(p.shape[0] for p in parts)
        if cond_channels == width + K:
            parts.append(_overlap_channels(x0, K, data.overlap_ratio, rng))
        elif cond_channels != width:
            raise ValueError(f"model takes {cond_channels} condition channels, data provides {width}")
        x0s.append(x0)
        conds.append(np.concatenate(parts, axis=0) if parts else None)
    x0 = np.stack(x0s).astype(np.uint8)
    condition = None if conds[0] is None else np.stack(conds)
    return x0, condition


def _dump_batch(dump_dir, **arrays):
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "nonfinite_batch.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: v for k, v in arrays.items() if v is not None})
    return path


def train_scale(
    model: UNetDenoiser,
    scenes: Sequence[SemanticGrid],
    schedule: NoiseSchedule,
    config: TrainConfig,
    data: ScaleData | None = None,
    csv_path=None,
    dump_dir=None,
    log: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place; returns it with the per-epoch loss curve."""
    data = data or ScaleData()
    if not scenes:
        raise ValueError("no training scenes")
    K = model.num_classes
    if any(s.num_classes != K for s in scenes):
        raise ValueError("scene class count differs from the model's")
    dims = scenes[0].dims
    if any(s.dims != dims for s in scenes):
        raise ValueError("training scenes must share one shape")
    if schedule.T != config.T:
        raise ValueError(f"schedule has T={schedule.T} but the config says T={config.T}")
    labels = [s.labels for s in scenes]
    opt = AdamW(model.params, config.learning_rate, config.beta1, config.beta2, config.eps, config.weight_decay)
    n = len(labels)
    bs = min(config.batch_size, n)
    steps_per_epoch = -(-n // bs)
    curve: list[EpochStats] = []
    start = time.perf_counter()
    steps = 0
    out_of_time = False
    for epoch in range(config.epochs):
        order = stream(config.seed, epoch).permutation(n)
        sums = np.zeros(3)
        count = 0
        for step in range(steps_per_epoch):
            idx = order[step * bs:(step + 1) * bs]
            rng = stream(config.seed, epoch, step + 1)
            x0, cond = make_batch([labels[i] for i in idx], K, data, model.condition_channels, config, rng)
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            x_t = corrupt(x0, schedule, t.reshape(-1, 1, 1, 1), K, rng)
            opt.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss, parts = batch_loss(model, schedule, x0, x_t, t, cond, config.lam)
                    tape.backward(loss)
            except (TrainingDiverged, FloatingPointError) as exc:
                where = _dump_batch(dump_dir, x0=x0, x_t=x_t, t=t, condition=cond)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1} step {step + 1}"
                    + (f"; batch written to {where}" if where else "")
                ) from exc
            opt.step()
            sums += (parts.total, parts.kl_posterior, parts.aux_reconstruction)
            count += 1
            steps += 1
            if config.time_budget is not None and time.perf_counter() - start >= config.time_budget:
                out_of_time = True
                break
        stats = EpochStats(epoch + 1, *(sums / count), count)
        curve.append(stats)
        if log is not None:
            log(stats)
        if out_of_time:
            break
    if csv_path is not None:
        write_loss_csv(csv_path, curve)
    return TrainResult(model, curve, steps, time.perf_counter() - start)


def write_loss_csv(path, curve: Sequence[EpochStats]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_total", "mean_kl", "mean_aux"])
        for s in curve:
            writer.writerow([s.epoch, repr(s.mean_total), repr(s.mean_kl), repr(s.mean_aux)])


def pyramid_scale_data(pyramid: ScenePyramid, level: int, crop_dims=None, overlap_ratio=0.0625) -> ScaleData:
    """Training-pair recipe for 1-based ``level`` of ``pyramid``."""
    coarse = pyramid.scales[level - 2].dims if level > 1 else None
    return ScaleData(pyramid.scales[level - 1].dims, coarse, crop_dims, pyramid.saf_mode, overlap_ratio)


# -- fine-tuning ----------------------------------------------------------------


@dataclass
class FinetunePlan:
    """Start from ``source`` (models or checkpoint paths, one per scale) and
    retrain the 1-based ``finetune_scales``; every other scale stays frozen."""

    source: Sequence
    finetune_scales: Sequence[int] = field(default_factory=lambda: [1])
    epochs: int = 200

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("fine-tune epochs must be >= 1")
        bad = [s for s in self.finetune_scales if not 1 <= s <= len(self.source)]
        if bad:
            raise ValueError(f"fine-tune scales {bad} are outside 1..{len(self.source)}")


def _load_source(src):
    if isinstance(src, (str, Path)):
        return load_model(src)
    if src is None:
        raise ValueError("every frozen scale needs a source checkpoint")
    return src


def finetune(
    plan: FinetunePlan,
    target_scenes: Sequence[SemanticGrid],
    config: TrainConfig,
    pyramid: ScenePyramid,
    schedule: NoiseSchedule,
    data_for: Callable[[int], ScaleData] | None = None,
) -> PyramidModels:
    """Fine-tune the listed scales on target data; frozen scales are returned as loaded."""
    if len(plan.source) != pyramid.levels:
        raise ValueError(f"{len(plan.source)} source models for {pyramid.levels} scales")
    models = [_load_source(s) for s in plan.source]
    K = models[0].num_classes
    if any(m.num_classes != K for m in models):
        raise ValueError("source models disagree on the class count")
    if target_scenes and target_scenes[0].num_classes != K:
        raise ValueError("target data and source checkpoints have different class counts")
    out = list(models)
    cfg = replace(config, epochs=plan.epochs)
    for level in sorted(set(plan.finetune_scales)):
        model = copy.deepcopy(models[level - 1])
        if not isinstance(model, UNetDenoiser):
            raise ValueError(f"scale {level} is not a trainable model")
        data = data_for(level) if data_for else pyramid_scale_data(pyramid, level)
        train_scale(model, target_scenes, schedule, cfg, data)
        out[level - 1] = model
    return PyramidModels(out)

"""Denoisers predicting clean-scene logits from a noised scene.

Two implementations share one calling convention, :func:`predict_x0_logits`:

* :class:`OracleDenoiser` knows the answer and returns sharp logits for it.  It
  drives the end-to-end reconstruction tests.
* :class:`UNetDenoiser` is a miniature 3-D UNet on the :mod:`voxdiff.autodiff`
  engine.  Conditioning channels are concatenated to the one-hot input.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import SemanticGrid

ORACLE_LOGIT = 10.0


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    blocks_per_level: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("UNet depth must be >= 1")
        if self.base_channels < 1 or self.blocks_per_level < 1:
            raise ValueError("channel and block counts must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")


@dataclass
class DenoiserInput:
    """A batch of noised scenes.

    ``x_t`` holds labels ``(B, X, Y, Z)``; the one-hot expansion is made by
    :meth:`one_hot`.  ``condition`` is ``(B, C_cond, X, Y, Z)`` soft
    probabilities.  ``origin`` places each crop on a larger canvas and is only
    read by oracles.
    """

    x_t: np.ndarray
    t: np.ndarray
    condition: np.ndarray | None = None
    origin: np.ndarray | None = None

    def __post_init__(self):
        self.x_t = np.asarray(self.x_t)
        if self.x_t.ndim == 3:
            self.x_t = self.x_t[None]
        if self.x_t.ndim != 4:
            raise ValueError(f"x_t must be (B, X, Y, Z), got {self.x_t.shape}")
        B = self.x_t.shape[0]
        self.t = np.broadcast_to(np.asarray(self.t, dtype=np.int64), (B,))
        if self.condition is not None:
            self.condition = np.asarray(self.condition)
            if self.condition.ndim == 4:
                self.condition = self.condition[None]
            if self.condition.shape[:1] + self.condition.shape[2:] != self.x_t.shape:
                raise ValueError(
                    f"condition {self.condition.shape} does not match x_t {self.x_t.shape}"
                )
        if self.origin is not None:
            self.origin = np.broadcast_to(np.asarray(self.origin, dtype=np.int64), (B, 3))

    @property
    def spatial(self):
        return self.x_t.shape[1:]

    def one_hot(self, K: int, dtype) -> np.ndarray:
        return np.moveaxis(np.eye(K, dtype=dtype)[self.x_t], -1, 1)


def _check_input(model, inp: DenoiserInput):
    if inp.x_t.size and inp.x_t.max() >= model.num_classes:
        raise ValueError("x_t label exceeds the model's class count")
    width = 0 if inp.condition is None else inp.condition.shape[1]
    if width != model.condition_channels:
        raise ValueError(
            f"model expects {model.condition_channels} condition channels, got {width}"
        )


class OracleDenoiser:
    """Returns ``+ORACLE_LOGIT`` on the ground-truth label and 0 elsewhere.

    ``truth`` is a canvas; each input is cropped at its ``origin`` (default
    zero).  With ``periodic`` the canvas wraps, so any origin is valid.
    """

    kind = "oracle"

    def __init__(self, truth: SemanticGrid, condition_channels: int = 0, periodic: bool = False):
        self.truth = truth
        self.num_classes = truth.num_classes
        self.condition_channels = int(condition_channels)
        self.periodic = periodic

    def crop(self, origin, shape) -> np.ndarray:
        ox, oy, oz = (int(v) for v in origin)
        X, Y, Z = shape
        if self.periodic:
            h, w, d = self.truth.dims
            ix = (ox + np.arange(X)) % h
            iy = (oy + np.arange(Y)) % w
            iz = (oz + np.arange(Z)) % d
            return self.truth.labels[np.ix_(ix, iy, iz)]
        out = self.truth.labels[ox:ox + X, oy:oy + Y, oz:oz + Z]
        if out.shape != (X, Y, Z) or min(ox, oy, oz) < 0:
            raise ValueError(f"crop at {origin} of size {shape} leaves the oracle canvas")
        return out

    def predict(self, inp: DenoiserInput) -> np.ndarray:
        _check_input(self, inp)
        B = inp.x_t.shape[0]
        origins = inp.origin if inp.origin is not None else np.zeros((B, 3), dtype=np.int64)
        labels = np.stack([self.crop(o, inp.spatial) for o in origins])
        return ORACLE_LOGIT * np.moveaxis(np.eye(self.num_classes)[labels], -1, 1)

    def state(self) -> dict[str, np.ndarray]:
        return {"truth": self.truth.labels.astype(np.float32)}

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "condition_channels": self.condition_channels,
            "periodic": self.periodic,
        }


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class UNetDenoiser:
    kind = "unet"

    def __init__(self, config: UNetConfig, num_classes: int, condition_channels: int, params: dict):
        self.config = config
        self.num_classes = int(num_classes)
        self.condition_channels = int(condition_channels)
        self.params: dict[str, Tensor] = params

    @property
    def input_channels(self) -> int:
        return self.num_classes + self.condition_channels

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def channels(self, level: int) -> int:
        return self.config.base_channels * 2**level

    # -- forward ---------------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _conv(self, name, x):
        return ad.conv3d(x, self._p(name + ".w"), self._p(name + ".b"))

    def _resblock(self, name, x, temb):
        h = self._conv(name + ".conv1", ad.relu(x))
        h = ad.broadcast_add(h, self._conv(name + ".time", temb))
        h = self._conv(name + ".conv2", ad.relu(h))
        h = ad.affine(h, self._p(name + ".gain"), self._p(name + ".shift"))
        return ad.add(x, h)

    def forward(self, inp: DenoiserInput) -> Tensor:
        """Logits ``(B, K, X, Y, Z)`` as a tensor on the active tape."""
        _check_input(self, inp)
        cfg = self.config
        factor = 2**cfg.depth
        if any(n % factor for n in inp.spatial):
            raise ValueError(f"spatial dims {inp.spatial} must be divisible by {factor}")
        dtype = self._p("in.w").data.dtype
        feats = [inp.one_hot(self.num_classes, dtype)]
        if inp.condition is not None:
            feats.append(inp.condition.astype(dtype))
        x = Tensor(np.concatenate(feats, axis=1), dtype=dtype)

        emb = ad.sinusoidal_time_embedding(inp.t, cfg.time_embed_dim)
        temb = Tensor(emb.reshape(emb.shape + (1, 1, 1)), dtype=dtype)
        temb = ad.relu(self._conv("time_mlp", temb))

        h = self._conv("in", x)
        skips = []
        for level in range(cfg.depth + 1):
            if level > 0:
                h = self._conv(f"down{level}", ad.avg_pool_2x(h))
            for b in range(cfg.blocks_per_level):
                h = self._resblock(f"enc{level}.{b}", h, temb)
            skips.append(h)
        for level in range(cfg.depth - 1, -1, -1):
            h = self._conv(f"up{level}", ad.nearest_upsample_2x(h))
            h = self._conv(f"merge{level}", ad.concat([h, skips[level]]))
            for b in range(cfg.blocks_per_level):
                h = self._resblock(f"dec{level}.{b}", h, temb)
        return self._conv("out", ad.relu(h))

    def predict(self, inp: DenoiserInput) -> np.ndarray:
        return self.forward(inp).data

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "condition_channels": self.condition_channels,
            "config": asdict(self.config),
        }


def _unet_shapes(cfg: UNetConfig, in_ch: int, K: int):
    """Ordered (name, shape, fan_in, init) for every parameter."""
    E = cfg.time_embed_dim
    shapes = []

    def conv(name, cin, cout, k, init="he"):
        shapes.append((name + ".w", (cout, cin, k, k, k), cin * k**3, init))
        shapes.append((name + ".b", (cout,), 0, "zeros"))

    def block(name, c):
        conv(name + ".conv1", c, c, 3)
        conv(name + ".time", E, c, 1)
        conv(name + ".conv2", c, c, 3)
        shapes.append((name + ".gain", (c,), 0, "residual_gain"))
        shapes.append((name + ".shift", (c,), 0, "zeros"))

    ch = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
    conv("time_mlp", E, E, 1)
    conv("in", in_ch, ch[0], 3)
    for level in range(cfg.depth + 1):
        if level > 0:
            conv(f"down{level}", ch[level - 1], ch[level], 1)
        for b in range(cfg.blocks_per_level):
            block(f"enc{level}.{b}", ch[level])
    for level in range(cfg.depth - 1, -1, -1):
        conv(f"up{level}", ch[level + 1], ch[level], 1)
        conv(f"merge{level}", 2 * ch[level], ch[level], 3)
        for b in range(cfg.blocks_per_level):
            block(f"dec{level}.{b}", ch[level])
    conv("out", ch[0], K, 1, init="zeros")
    return shapes


def build_unet(
    config: UNetConfig,
    num_classes: int,
    conditioned: bool | int = False,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> UNetDenoiser:
    """Initialise a UNet.

    ``conditioned`` may be a bool (``K`` condition channels when true) or an
    explicit channel count, e.g. ``2 * K`` for scene subdivision where the
    overlap labels ride alongside the upsampled coarse scene.
    """
    K = int(num_classes)
    if conditioned is True:
        cond = K
    elif conditioned is False:
        cond = 0
    else:
        cond = int(conditioned)
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {}
    for name, shape, fan_in, init in _unet_shapes(config, K + cond, K):
        if init == "he":
            value = _he(rng, shape, fan_in)
        elif init == "residual_gain":
            value = np.full(shape, 0.5)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name, dtype=dtype)
    return UNetDenoiser(config, K, cond, params)


def predict_x0_logits(model, inp: DenoiserInput) -> np.ndarray:
    """``(B, K, X, Y, Z)`` logits for the clean scene."""
    out = np.asarray(model.predict(inp), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("denoiser produced non-finite logits")
    return out


def grid_predictor(model, condition: np.ndarray | None = None, origin=None):
    """Adapt a model to the ``predict(x_t_grid, t) -> (h, w, d, K)`` callback form."""

    def predict(x_t: SemanticGrid, t: int) -> np.ndarray:
        inp = DenoiserInput(x_t.labels[None], np.array([t]), condition, origin)
        return np.moveaxis(predict_x0_logits(model, inp)[0], 0, -1)

    return predict


# -- persistence ---------------------------------------------------------------


def save_model(model, path) -> None:
    """Write ``path`` (``.vdck`` parameters) plus ``path.json`` metadata."""
    path = Path(path)
    path.write_bytes(ad.save_params(model.state()))
    Path(str(path) + ".json").write_text(json.dumps(model.metadata(), indent=2, sort_keys=True))


def load_model(path):
    path = Path(path)
    meta_path = Path(str(path) + ".json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"checkpoint {path} or its metadata is missing")
    meta = json.loads(meta_path.read_text())
    state = ad.load_params(path.read_bytes())
    if meta["kind"] == "oracle":
        labels = state["truth"].astype(np.uint8)
        truth = SemanticGrid(labels, meta["num_classes"])
        return OracleDenoiser(truth, meta["condition_channels"], meta.get("periodic", False))
    if meta["kind"] != "unet":
        raise ad.CheckpointError(f"unknown model kind {meta['kind']!r}")
    cfg = UNetConfig(**meta["config"])
    model = build_unet(cfg, meta["num_classes"], meta["condition_channels"])
    if set(state) != set(model.params):
        raise ad.CheckpointError("checkpoint parameters do not match the architecture")
    for name, value in state.items():
        if value.shape != model.params[name].shape:
            raise ad.CheckpointError(f"shape mismatch for {name}")
        model.params[name].data = value.astype(np.float32)
    return model

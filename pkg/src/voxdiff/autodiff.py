"""A small tape-based reverse-mode engine for 5-D volume tensors.

Tensors are laid out ``(batch, channels, x, y, z)``.  Only the operations the
denoiser needs are provided and there is no general broadcasting.  Work runs in
float32 unless :func:`precision` selects float64 (used by gradient checks).
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Sequence

import numpy as np

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


@contextlib.contextmanager
def precision(dtype):
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def default_dtype():
    return _DTYPE[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim > 5:
            raise ValueError(f"tensors have at most 5 axes, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


class Tape:
    """Records differentiable operations in execution order."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def backward(self, out: Tensor, grad=None):
        """Accumulate ``d out / d leaf`` into ``.grad`` of every leaf needing it."""
        if grad is None:
            if out.data.size != 1:
                raise ValueError("backward needs an explicit gradient for non-scalar outputs")
            grad = np.ones_like(out.data)
        grads = {id(out): np.asarray(grad, dtype=out.data.dtype)}
        for node, inputs, backward in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        # whatever remains belongs to leaves (parameters / inputs)
        leaves = {id(t): t for _, inputs, _ in self.records for t in inputs}
        leaves[id(out)] = out
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None or not leaf.requires_grad:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _record(out_data, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs and _TAPES:
        _TAPES[-1].records.append((out, tuple(inputs), backward))
    return out


def _finite(*tensors: Tensor):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite values in input {t!r}")


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def function(forward_value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Register a custom differentiable node.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    return _record(np.asarray(forward_value), inputs, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[:1] + t.shape[2:] != base[:1] + base[2:]:
            raise ValueError(f"concat: incompatible shapes {base} and {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _record(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def _check_5d(x: Tensor, op: str):
    if x.data.ndim != 5:
        raise ValueError(f"{op}: expected (B, C, X, Y, Z), got {x.shape}")


def nearest_upsample_2x(x: Tensor) -> Tensor:
    _check_5d(x, "nearest_upsample_2x")
    B, C, X, Y, Z = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def backward(g):
        return (g.reshape(B, C, X, 2, Y, 2, Z, 2).sum(axis=(3, 5, 7)),)

    return _record(out, (x,), backward)


def avg_pool_2x(x: Tensor) -> Tensor:
    _check_5d(x, "avg_pool_2x")
    B, C, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"avg_pool_2x: spatial dims {x.shape[2:]} must be even")
    out = x.data.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2).mean(axis=(3, 5, 7))

    def backward(g):
        up = g.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
        return (up * x.data.dtype.type(0.125),)

    return _record(out, (x,), backward)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def affine(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Per-channel ``scale * x + bias`` with ``(C,)`` parameters."""
    C = x.shape[1]
    if scale.shape != (C,) or bias.shape != (C,):
        raise ValueError(f"affine: parameters must have shape ({C},)")
    s = _channel_view(scale.data, x.data.ndim)
    b = _channel_view(bias.data, x.data.ndim)
    axes = (0,) + tuple(range(2, x.data.ndim))

    def backward(g):
        return g * s, (g * x.data).sum(axis=axes), g.sum(axis=axes)

    return _record(x.data * s + b, (x, scale, bias), backward)


def broadcast_add(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-channel vector: ``v`` is ``(C,)``, ``(B, C)`` or ``(B, C, 1, 1, 1)``."""
    _check_5d(x, "broadcast_add")
    B, C = x.shape[:2]
    if v.shape == (C,):
        vv = v.data.reshape(1, C, 1, 1, 1)
    elif v.shape in ((B, C), (B, C, 1, 1, 1)):
        vv = v.data.reshape(B, C, 1, 1, 1)
    else:
        raise ValueError(f"broadcast_add: vector shape {v.shape} incompatible with {x.shape}")

    def backward(g):
        if v.shape == (C,):
            return g, g.sum(axis=(0, 2, 3, 4))
        return g, g.sum(axis=(2, 3, 4)).reshape(v.shape)

    return _record(x.data + vv, (x, v), backward)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 'same' cross-correlation; x (B,C,X,Y,Z), w (O,C,kx,ky,kz)."""
    kx, ky, kz = w.shape[2:]
    xl = np.moveaxis(x, 1, -1)
    if (kx, ky, kz) == (1, 1, 1):
        out = xl @ w[:, :, 0, 0, 0].T
        return np.moveaxis(out, -1, 1)
    px, py, pz = kx // 2, ky // 2, kz // 2
    xp = np.pad(xl, ((0, 0), (px, px), (py, py), (pz, pz), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))
    out = np.tensordot(win, w, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
    return np.moveaxis(out, -1, 1)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3-D convolution, stride 1, zero 'same' padding, odd kernel sizes."""
    _check_5d(x, "conv3d")
    if weight.data.ndim != 5 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv3d: weight {weight.shape} does not fit input {x.shape}")
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ValueError("conv3d: kernel sizes must be odd")
    _finite(x)
    w = weight.data
    out = _conv_same(x.data, w)
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ValueError("conv3d: bias must have one entry per output channel")
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
        inputs.append(bias)
    kx, ky, kz = w.shape[2:]

    def backward(g):
        gx = None
        if x.requires_grad:
            # input gradient: correlate with the flipped, channel-transposed kernel
            w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _conv_same(g, w_flip)
        gl = np.moveaxis(g, 1, -1)
        xl = np.moveaxis(x.data, 1, -1)
        if (kx, ky, kz) == (1, 1, 1):
            gw = np.tensordot(gl, xl, axes=([0, 1, 2, 3], [0, 1, 2, 3]))[:, :, None, None, None]
        else:
            px, py, pz = kx // 2, ky // 2, kz // 2
            xp = np.pad(xl, ((0, 0), (px, px), (py, py), (pz, pz), (0, 0)))
            win = np.lib.stride_tricks.sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))
            gw = np.tensordot(gl, win, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        grads = [gx, gw.astype(w.dtype)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _record(out.astype(w.dtype, copy=False), inputs, backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over voxels of ``-log softmax(logits)[label]``; classes on axis 1."""
    _finite(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != z.shape[:1] + z.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {z.shape}")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    n = labels.size
    loss = -picked.sum() / n

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        return ((p - onehot) * (g / n),)

    return _record(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def sinusoidal_time_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]`` with geometric ``f_i``.

    ``t`` may be a scalar or a 1-D array; the result has a trailing ``dim`` axis.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = max_period ** (-np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# -- parameter checkpoints ---------------------------------------------------

CKPT_MAGIC = b"VDCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(params: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def load_params(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if bytes(view[:4]) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(view):
                raise CheckpointError("truncated checkpoint")
            out[name] = np.frombuffer(view[pos:pos + size], dtype="<f4").reshape(dims).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out

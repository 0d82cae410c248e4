"""Categorical diffusion under the uniform kernel.

Array-level helpers work on flattened voxels: labels ``(N,)`` and class
probabilities or logits ``(N, K)``.  The grid-level wrappers take
:class:`~voxdiff.grid.SemanticGrid` values and ``(h, w, d, K)`` logit volumes.
The step ``t`` may be a scalar or a per-voxel integer array, which is how a
training batch mixes steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SemanticGrid
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class LossBreakdown:
    kl_posterior: float
    aux_reconstruction: float
    lam: float

    @property
    def total(self) -> float:
        return self.kl_posterior + self.lam * self.aux_reconstruction


def stream(seed, *key: int) -> np.random.Generator:
    """Counter-style generator for a (seed, key...) pair.

    Streams are derived from the key path only, so a draw never depends on how
    many other streams were consumed before it.
    """
    if isinstance(seed, np.random.SeedSequence):
        base = seed
    else:
        base = np.random.SeedSequence(int(seed))
    child = np.random.SeedSequence(
        base.entropy, spawn_key=tuple(base.spawn_key) + tuple(int(k) for k in key)
    )
    return np.random.Generator(np.random.Philox(child))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row by inverse CDF; one uniform per row."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _check_step(schedule: NoiseSchedule, t, lo: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if (t < lo).any() or (t > schedule.T).any():
        raise ValueError(f"step t must be in [{lo}, {schedule.T}], got {t}")
    return t


def corrupt(labels: np.ndarray, schedule: NoiseSchedule, t, K: int, rng: np.random.Generator):
    """Draw ``x_t ~ Cat(x_0 Qbar_t)`` for every entry of ``labels``.

    A single uniform ``u`` per voxel: keep the label when ``u < alpha_bar``,
    otherwise map the remainder of ``u`` onto a uniform class.
    """
    t = _check_step(schedule, t, 0)
    labels = np.asarray(labels)
    bar = np.broadcast_to(schedule.alpha_bars[t], labels.shape)
    u = rng.random(labels.shape)
    keep = u < bar
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(keep, 0.0, (u - bar) / (1.0 - bar))
    noise = np.minimum((frac * K).astype(np.int64), K - 1)
    return np.where(keep, labels, noise).astype(labels.dtype)


def forward_sample(grid_x0: SemanticGrid, schedule: NoiseSchedule, t: int, rng) -> SemanticGrid:
    t = int(_check_step(schedule, t, 0))
    if t == 0:
        return grid_x0
    return grid_x0.with_labels(corrupt(grid_x0.labels, schedule, t, grid_x0.num_classes, rng))


def _posterior_terms(schedule: NoiseSchedule, t, K: int):
    """Scalars shared by the posterior and its gradient, broadcast over voxels."""
    beta = schedule.betas[t - 1]
    bar_prev = schedule.alpha_bars[t - 1]
    a_other = beta / K
    a_same = 1.0 - beta + a_other
    c_off = (1.0 - bar_prev) / K
    c_diag = bar_prev + c_off
    # Z_j = sum_k Q_t[k, x_t] Qbar_{t-1}[j, k], split on j == x_t
    z_same = a_same * c_diag + (K - 1) * a_other * c_off
    z_other = a_same * c_off + a_other * c_diag + (K - 2) * a_other * c_off
    return beta, bar_prev, a_other, c_off, z_same, z_other


def mixture_posterior(schedule: NoiseSchedule, t, x_t: np.ndarray, p0: np.ndarray) -> np.ndarray:
    """``sum_j p0[j] * q(x_{t-1} | x_t, x_0 = j)`` for each row.

    Pairs ``(x_t, j)`` that the forward chain cannot produce (only possible
    while ``alpha_bar_t == 1``) are given the deterministic posterior
    ``e_{x_t}``.
    """
    t = _check_step(schedule, t, 1)
    x_t = np.asarray(x_t, dtype=np.int64)
    p0 = np.asarray(p0, dtype=np.float64)
    n, K = p0.shape
    t = np.broadcast_to(t, (n,))
    beta, bar_prev, a_other, c_off, z_same, z_other = _posterior_terms(schedule, t, K)
    rows = np.arange(n)
    is_xt = np.zeros((n, K), dtype=bool)
    is_xt[rows, x_t] = True
    Z = np.where(is_xt, z_same[:, None], z_other[:, None])
    dead = Z <= 0.0
    w = np.where(dead, 0.0, p0 / np.where(dead, 1.0, Z))
    S = w.sum(axis=1, keepdims=True)
    a = a_other[:, None] + np.where(is_xt, (1.0 - beta)[:, None], 0.0)
    r = a * (bar_prev[:, None] * w + c_off[:, None] * S)
    if dead.any():
        r[rows, x_t] += np.where(dead, p0, 0.0).sum(axis=1)
    return r


def posterior_row(schedule: NoiseSchedule, t: int, x_t_class: int, x0_class: int, K: int) -> np.ndarray:
    """``q(x_{t-1} | x_t, x_0)`` as a length-K probability vector."""
    if int(t) < 1:
        raise ValueError("the posterior is defined for t >= 1")
    if not (0 <= x_t_class < K and 0 <= x0_class < K):
        raise ValueError("class index out of range")
    p0 = np.zeros((1, K))
    p0[0, x0_class] = 1.0
    return mixture_posterior(schedule, t, np.array([x_t_class]), p0)[0]


def _check_logits(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    return logits


def reverse_step_distribution(schedule: NoiseSchedule, t: int, x_t_class: int, x0_logits) -> np.ndarray:
    """``p(x_{t-1} | x_t)``: posterior rows averaged under ``softmax(x0_logits)``."""
    logits = _check_logits(x0_logits)
    p0 = softmax(logits)[None, :]
    return mixture_posterior(schedule, t, np.array([x_t_class]), p0)[0]


def sample_reverse_step(
    schedule: NoiseSchedule,
    t: int,
    grid_x_t: SemanticGrid,
    x0_logits: np.ndarray,
    rng: np.random.Generator | None,
    deterministic: bool = False,
) -> SemanticGrid:
    """Draw ``X_{t-1}`` voxel-wise; ``deterministic`` takes the argmax instead."""
    K = grid_x_t.num_classes
    expected = grid_x_t.dims + (K,)
    if tuple(np.shape(x0_logits)) != expected:
        raise ValueError(f"logits shape {np.shape(x0_logits)} does not match {expected}")
    logits = _check_logits(x0_logits).reshape(-1, K)
    x_t = grid_x_t.labels.reshape(-1)
    probs = mixture_posterior(schedule, t, x_t, softmax(logits))
    if deterministic:
        new = np.argmax(probs, axis=1)
    else:
        new = sample_categorical(probs, rng)
    return grid_x_t.with_labels(new.reshape(grid_x_t.dims).astype(np.uint8))


def hybrid_loss_and_grad(
    schedule: NoiseSchedule,
    t,
    x0: np.ndarray,
    x_t: np.ndarray,
    logits: np.ndarray,
    lam: float,
    need_grad: bool = True,
):
    """Voxel-mean hybrid loss and its gradient with respect to ``logits``.

    ``kl = mean KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t))`` and
    ``aux = mean -log softmax(logits)[x_0]``.
    """
    t = _check_step(schedule, t, 1)
    logits = _check_logits(logits)
    n, K = logits.shape
    x0 = np.asarray(x0, dtype=np.int64).reshape(-1)
    x_t = np.asarray(x_t, dtype=np.int64).reshape(-1)
    t = np.broadcast_to(t, (n,))
    rows = np.arange(n)

    onehot0 = np.zeros((n, K))
    onehot0[rows, x0] = 1.0
    q = mixture_posterior(schedule, t, x_t, onehot0)
    logp = log_softmax(logits)
    p = np.exp(logp)
    r = mixture_posterior(schedule, t, x_t, p)

    tiny = np.finfo(np.float64).tiny
    pos = q > 0
    r_safe = np.maximum(r, tiny)
    kl_terms = np.where(pos, q * (np.log(np.where(pos, q, 1.0)) - np.log(r_safe)), 0.0)
    kl = max(float(kl_terms.sum() / n), 0.0)
    aux = float(-logp[rows, x0].sum() / n)
    breakdown = LossBreakdown(kl, max(aux, 0.0), float(lam))
    if not need_grad:
        return breakdown, None

    beta, bar_prev, a_other, c_off, z_same, z_other = _posterior_terms(schedule, t, K)
    is_xt = np.zeros((n, K), dtype=bool)
    is_xt[rows, x_t] = True
    a = a_other[:, None] + np.where(is_xt, (1.0 - beta)[:, None], 0.0)
    Z = np.where(is_xt, z_same[:, None], z_other[:, None])
    G = np.where(pos, -q / r_safe, 0.0) / n
    Ga = G * a
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(Z > 0, (bar_prev[:, None] * Ga + c_off[:, None] * Ga.sum(1, keepdims=True)) / Z, G[rows, x_t][:, None])
    dlogits = p * (g - (p * g).sum(axis=1, keepdims=True))
    dlogits += lam * (p - onehot0) / n
    return breakdown, dlogits


def hybrid_loss(
    schedule: NoiseSchedule,
    t: int,
    grid_x0: SemanticGrid,
    grid_x_t: SemanticGrid,
    x0_logits: np.ndarray,
    lam: float = 1e-3,
) -> LossBreakdown:
    K = grid_x0.num_classes
    if grid_x0.dims != grid_x_t.dims:
        raise ValueError("x_0 and x_t grids differ in shape")
    if tuple(np.shape(x0_logits)) != grid_x0.dims + (K,):
        raise ValueError("logits volume does not match the grid")
    breakdown, _ = hybrid_loss_and_grad(
        schedule,
        t,
        grid_x0.labels.reshape(-1),
        grid_x_t.labels.reshape(-1),
        np.asarray(x0_logits).reshape(-1, K),
        lam,
        need_grad=False,
    )
    return breakdown


def uniform_noise(dims, K: int, rng: np.random.Generator) -> SemanticGrid:
    """A draw of ``X_T`` under a schedule that ends at the uniform distribution."""
    return SemanticGrid(rng.integers(0, K, size=tuple(dims), dtype=np.uint8), K)


def reverse_chain(predict, schedule: NoiseSchedule, x_T: SemanticGrid, seed, deterministic=False, key=()):
    """Run ``t = T .. 1``; ``predict(x_t, t)`` returns an ``(h, w, d, K)`` logit volume.

    Step ``t`` draws from ``stream(seed, *key, t)``.
    """
    x = x_T
    for t in range(schedule.T, 0, -1):
        logits = predict(x, t)
        rng = None if deterministic else stream(seed, *key, t)
        x = sample_reverse_step(schedule, t, x, logits, rng, deterministic=deterministic)
    return x

"""Uniform-transition noise schedules.

Under the uniform kernel every transition matrix is a mix of the identity and
the all-ones matrix ``J``::

    Q_t    = (1 - beta_t)  * I + beta_t       * J / K
    Qbar_t = alpha_bar_t   * I + (1 - alpha_bar_t) * J / K

so a schedule only needs the two scalar sequences; no ``K x K`` matrix is ever
built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # beta_1 .. beta_T at index 0 .. T-1
    alpha_bars: np.ndarray  # alpha_bar_0 .. alpha_bar_T

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("a schedule needs at least one step")
        if not np.all(np.isfinite(betas)) or (betas < 0).any() or (betas > 1).any():
            raise ValueError("betas must lie in [0, 1]")
        if bars.shape != (betas.size + 1,) or bars[0] != 1.0:
            raise ValueError("alpha_bars must have T+1 entries starting at 1")
        betas.setflags(write=False)
        bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t):
        """beta_t for ``1 <= t <= T`` (scalar or integer array)."""
        t = np.asarray(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"step t must be in [1, {self.T}], got {t}")
        return self.betas[t - 1]

    def alpha_bar(self, t):
        t = np.asarray(t)
        if (t < 0).any() or (t > self.T).any():
            raise ValueError(f"step t must be in [0, {self.T}], got {t}")
        return self.alpha_bars[t]

    def to_config(self) -> dict:
        return {"T": self.T, "betas": [float(b) for b in self.betas]}


def default_schedule(T: int) -> NoiseSchedule:
    """``beta_t = 1 / (T - t + 1)``, giving ``alpha_bar_t = (T - t) / T``.

    The last step has ``beta_T = 1`` so ``X_T`` is exactly uniform.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(1, T + 1, dtype=np.float64)
    betas = 1.0 / (T - t + 1.0)
    bars = (T - np.arange(T + 1, dtype=np.float64)) / T
    return NoiseSchedule(betas, bars)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("betas must be a non-empty sequence")
    if not np.all(np.isfinite(betas)) or (betas < 0).any() or (betas > 1).any():
        raise ValueError("betas must lie in [0, 1]")
    bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas, bars)


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    """Build from ``{"T": int, "betas": "default" | [floats]}``."""
    betas = cfg.get("betas", "default")
    if betas == "default":
        return default_schedule(int(cfg["T"]))
    sched = schedule_from_betas(betas)
    if "T" in cfg and int(cfg["T"]) != sched.T:
        raise ValueError(f"T={cfg['T']} disagrees with {sched.T} listed betas")
    return sched


def q_step_row(schedule: NoiseSchedule, t: int, from_class: int, K: int) -> np.ndarray:
    """Row ``from_class`` of ``Q_t``: distribution of ``x_t`` given ``x_{t-1}``."""
    if not 0 <= from_class < K:
        raise ValueError(f"class {from_class} not in [0, {K})")
    beta = float(schedule.beta(t))
    row = np.full(K, beta / K)
    row[from_class] += 1.0 - beta
    return row


def q_cumulative_row(schedule: NoiseSchedule, t: int, from_class: int, K: int) -> np.ndarray:
    """Row ``from_class`` of ``Qbar_t``: distribution of ``x_t`` given ``x_0``."""
    if not 0 <= from_class < K:
        raise ValueError(f"class {from_class} not in [0, {K})")
    bar = float(schedule.alpha_bar(t))
    row = np.full(K, (1.0 - bar) / K)
    row[from_class] += bar
    return row

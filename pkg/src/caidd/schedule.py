"""Cosine noise schedule and the closed-form pieces of the DDPM process.

Timesteps are 1-indexed everywhere in the public API: ``t = 1`` is the
least noisy step and ``t = T`` the most noisy one. Arrays are stored
0-indexed internally, so ``alpha_bar[t - 1]`` holds the value for step t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractError, DimensionError, NumericError

ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    s: float = 0.008
    beta_clip: float = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step beta, alpha, alpha_bar and alpha_bar_prev in float64."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    config: ScheduleConfig | None = None
    _torch: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "alpha_bar_prev"):
            arr = getattr(self, name)
            arr.setflags(write=False)
            if arr.shape != (self.T,):
                raise DimensionError(f"{name} has shape {arr.shape}, expected ({self.T},)")

    def check_t(self, t) -> None:
        ts = t.reshape(-1).tolist() if isinstance(t, torch.Tensor) else [t]
        for v in ts:
            if not 1 <= int(v) <= self.T:
                raise IndexError(f"timestep {v} outside 1..{self.T}")

    def coef(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        """Gather ``name`` at timestep(s) t, shaped to broadcast against ``like``."""
        self.check_t(t)
        key = (name, like.dtype, like.device)
        table = self._torch.get(key)
        if table is None:
            table = torch.tensor(getattr(self, name), dtype=like.dtype, device=like.device)
            self._torch[key] = table
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            vals = table[t.to(torch.long) - 1]
            return vals.reshape(-1, *([1] * (like.ndim - 1)))
        return table[int(t) - 1]


def _cosine_f(t: np.ndarray, T: int, s: float) -> np.ndarray:
    return np.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2


def make_cosine_schedule(T: int = 1000, s: float = 0.008, beta_clip: float = 0.999) -> NoiseSchedule:
    """Improved-DDPM cosine schedule with per-step beta clipping.

    alpha_bar is rebuilt as the cumulative product of the clipped alphas so
    that ``alpha * alpha_bar_prev == alpha_bar`` holds bit for bit.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0 < s < 1:
        raise ConfigError(f"s must lie in (0, 1), got {s!r}")
    if not 0 < beta_clip < 1:
        raise ConfigError(f"beta_clip must lie in (0, 1), got {beta_clip!r}")
    T = int(T)
    steps = np.arange(T + 1, dtype=np.float64)
    f = _cosine_f(steps, T, s)
    ab = f / f[0]
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], beta_clip)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    return NoiseSchedule(T, beta, alpha, alpha_bar, alpha_bar_prev, ScheduleConfig(T, s, beta_clip))


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_cosine_schedule(cfg.T, cfg.s, cfg.beta_clip)


def respace(sched: NoiseSchedule, timesteps) -> NoiseSchedule:
    """Schedule restricted to an increasing subset of the original timesteps.

    Step k of the result jumps from original step ``timesteps[k-1]`` to
    ``timesteps[k-2]`` (or to the clean image for k = 1), so the usual
    posterior formula applies unchanged.
    """
    ts = np.asarray(sorted(int(t) for t in timesteps))
    if ts.size == 0 or ts[0] < 1 or ts[-1] > sched.T or np.any(np.diff(ts) <= 0):
        raise ContractError("timesteps must be distinct values in 1..T")
    alpha_bar = sched.alpha_bar[ts - 1].copy()
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    alpha = alpha_bar / alpha_bar_prev
    beta = 1.0 - alpha
    return NoiseSchedule(len(ts), beta, alpha, alpha_bar, alpha_bar_prev, None)


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced timesteps from T down to 1 (inclusive), descending."""
    if steps < 1 or steps > T:
        raise ContractError(f"steps must lie in 1..{T}, got {steps}")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def _match(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    _match(x0, eps, "forward_diffuse")
    ab = sched.coef("alpha_bar", t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


def posterior_step(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    z: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral DDPM step x_t -> x_{t-1} with the small posterior variance.

    ``z`` must be supplied for t > 1 and omitted at t = 1, where the step is
    deterministic.
    """
    _match(x_t, eps_pred, "posterior_step")
    sched.check_t(t)
    t = int(t)
    if t == 1 and z is not None:
        raise ContractError("noise z must not be supplied at t = 1")
    if t > 1 and z is None:
        raise ContractError(f"noise z is required at t = {t}")
    if z is not None:
        _match(x_t, z, "posterior_step noise")
    i = t - 1
    beta, alpha, ab = sched.beta[i], sched.alpha[i], sched.alpha_bar[i]
    mean = (x_t - (beta / math.sqrt(1 - ab)) * eps_pred) / math.sqrt(alpha)
    if t == 1:
        return mean
    var = beta * (1 - sched.alpha_bar_prev[i]) / (1 - ab)
    return mean + math.sqrt(var) * z


def x0_estimate(x_t: torch.Tensor, eps_pred: torch.Tensor, t, sched: NoiseSchedule, clamp: bool = True) -> torch.Tensor:
    """Invert the forward process for x0 given a noise estimate, clamped to [-1, 1]."""
    _match(x_t, eps_pred, "x0_estimate")
    ab = sched.coef("alpha_bar", t, x_t)
    low = float(ab.min()) if isinstance(ab, torch.Tensor) else float(ab)
    if low < ALPHA_BAR_FLOOR:
        raise NumericError(
            f"alpha_bar={low:.3g} < {ALPHA_BAR_FLOOR:g}: x0 estimate is unstable here; "
            "cap the timesteps used for expert losses (expert_t_max) below this step"
        )
    x0 = (x_t - torch.sqrt(1 - ab) * eps_pred) / torch.sqrt(ab)
    return x0.clamp(-1.0, 1.0) if clamp else x0

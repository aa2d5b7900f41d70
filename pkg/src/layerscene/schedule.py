"""Noise schedules, forward noising, and single reverse diffusion steps.

Conventions: steps are 1-based, ``t = T`` is pure noise and ``t = 0`` is
clean data. ``lambda_bar(0) = 1``. The forward marginal is

    x_t = sqrt(lambda_bar_t) * x0 + sqrt(1 - lambda_bar_t) * eps

and the stochastic reverse step is

    x_{t-1} = (x_t - (1 - lambda_t) / sqrt(1 - lambda_bar_t) * eps_hat)
              / sqrt(lambda_t) + sigma_t * z.

All randomness is caller-supplied; every function here is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise tables for a T-step diffusion process.

    Arrays are indexed 0..T-1 for steps 1..T; use the accessors for the
    1-based step convention.
    """

    beta: np.ndarray
    lam: np.ndarray = field(repr=False)
    lam_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("beta", "lam", "lam_bar", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            if arr.shape != (self.T,):
                raise ScheduleError(f"{name} must have length T={self.T}")
        if np.any(self.sigma < 0):
            raise ScheduleError("sigma must be nonnegative")
        if np.any(self.lam_bar <= 0) or np.any(self.lam_bar > 1):
            raise ScheduleError("lambda_bar values must lie in (0, 1]")
        if np.any(np.diff(self.lam_bar) > 0):
            raise ScheduleError("lambda_bar must be decreasing in t")

    @property
    def T(self) -> int:
        return len(self.beta)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step t={t} outside 1..{self.T}")
        return t

    def lambda_bar(self, t: int) -> float:
        """Cumulative product of (1 - beta) up to step t; 1.0 at t=0."""
        t = int(t)
        if t == 0:
            return 1.0
        return float(self.lam_bar[self._check_t(t) - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def lam_at(self, t: int) -> float:
        return float(self.lam[self._check_t(t) - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._check_t(t) - 1])

    def to_dict(self) -> dict:
        """Explicit beta table plus T, for checkpoint serialization."""
        return {"T": self.T, "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        beta = np.asarray(data["beta"], dtype=np.float64)
        if len(beta) != int(data["T"]):
            raise ScheduleError("beta table length disagrees with T")
        return from_betas(beta)


def from_betas(beta: np.ndarray) -> NoiseSchedule:
    """Derive lambda, lambda_bar and sigma tables from a beta table.

    Accepts beta == 0 entries (identity steps; sigma is 0 there) so that
    degenerate test schedules can be expressed; build_schedule is stricter.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ScheduleError("beta table must be a nonempty 1-d array")
    if np.any(beta < 0) or np.any(beta >= 1):
        raise ScheduleError("beta values must lie in [0, 1)")
    lam = 1.0 - beta
    lam_bar = np.cumprod(lam)
    prev_bar = np.concatenate([[1.0], lam_bar[:-1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = np.sqrt(beta * (1.0 - prev_bar) / (1.0 - lam_bar))
    sigma = np.where(beta == 0.0, 0.0, sigma)
    return NoiseSchedule(beta=beta, lam=lam, lam_bar=lam_bar, sigma=sigma)


def build_schedule(
    T: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    kind: str = "linear",
) -> NoiseSchedule:
    """Linear beta schedule over steps 1..T.

    ``kind`` is an enum for future schedule families; only "linear" exists.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return from_betas(np.linspace(beta_start, beta_end, int(T)))


def _as_grid(x) -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _check_shapes(*grids: np.ndarray) -> None:
    shapes = {g.shape for g in grids}
    if len(shapes) > 1:
        raise ValueError(f"grid shape mismatch: {sorted(shapes)}")


def forward_noise(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """Noise clean data to level t: sqrt(lb)*x0 + sqrt(1-lb)*eps."""
    x0, eps = _as_grid(x0), _as_grid(eps)
    _check_shapes(x0, eps)
    lb = s.lambda_bar(s._check_t(t))
    dt = x0.dtype.type
    return dt(np.sqrt(lb)) * x0 + dt(np.sqrt(1.0 - lb)) * eps


def ddpm_step(x_t, eps_hat, t: int, z, s: NoiseSchedule) -> np.ndarray:
    """One stochastic reverse step from t to t-1. z must be 0 at t=1."""
    x_t, eps_hat, z = _as_grid(x_t), _as_grid(eps_hat), _as_grid(z)
    _check_shapes(x_t, eps_hat, z)
    t = s._check_t(t)
    lam = s.lam_at(t)
    lb = s.lambda_bar(t)
    # identity step (beta=0): the eps coefficient is 0/0 in the limit
    eps_coef = (1.0 - lam) / np.sqrt(1.0 - lb) if lam < 1.0 else 0.0
    dt = x_t.dtype.type
    mean = dt(1.0 / np.sqrt(lam)) * (x_t - dt(eps_coef) * eps_hat)
    return mean + dt(s.sigma_at(t)) * z


def ddim_step(x_t, eps_hat, t: int, t_prev: int, s: NoiseSchedule) -> np.ndarray:
    """One deterministic (eta=0) reverse step from t to t_prev < t."""
    x_t, eps_hat = _as_grid(x_t), _as_grid(eps_hat)
    _check_shapes(x_t, eps_hat)
    t = s._check_t(t)
    t_prev = int(t_prev)
    if not 0 <= t_prev < t:
        raise ScheduleError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    lb = s.lambda_bar(t)
    lb_prev = s.lambda_bar(t_prev)
    dt = x_t.dtype.type
    x0_hat = (x_t - dt(np.sqrt(1.0 - lb)) * eps_hat) * dt(1.0 / np.sqrt(lb))
    return dt(np.sqrt(lb_prev)) * x0_hat + dt(np.sqrt(1.0 - lb_prev)) * eps_hat

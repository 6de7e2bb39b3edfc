"""Variance-preserving noise schedules and the training-time timestep sampler.

A schedule is stored on a discrete grid of ``grid_size`` indices; index 0 is
(almost) clean data and the last index is (almost) pure noise.  Every grid
point satisfies ``alpha**2 + sigma**2 == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ALPHA_FLOOR = 1e-4
SIGMA_FLOOR = 1e-6

SCHEDULE_KINDS = ("vp-linear", "vp-cosine")


class Coef(NamedTuple):
    """Signal/noise coefficients at a single (possibly off-grid) time."""

    alpha: float
    sigma: float

    @property
    def log_snr(self) -> float:
        return math.log(self.alpha / self.sigma)

    @classmethod
    def from_log_snr(cls, lam: float) -> "Coef":
        # VP: alpha^2 = sigmoid(2 lam), sigma^2 = sigmoid(-2 lam)
        return cls(1.0 / math.sqrt(1.0 + math.exp(-2.0 * lam)),
                   1.0 / math.sqrt(1.0 + math.exp(2.0 * lam)))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    alpha: np.ndarray
    sigma: np.ndarray
    log_snr: np.ndarray

    @property
    def grid_size(self) -> int:
        return int(self.alpha.shape[0])

    def coef(self, t) -> Coef:
        """Coefficients at grid index ``t``; a :class:`Coef` passes through."""
        if isinstance(t, Coef):
            return t
        i = self.index(t)
        return Coef(float(self.alpha[i]), float(self.sigma[i]))

    def index(self, t) -> int:
        if isinstance(t, (int, np.integer)):
            i = int(t)
        else:
            # continuous time in grid units: nearest index
            i = int(round(float(t)))
        if not 0 <= i < self.grid_size:
            raise ValueError(f"timestep {t} outside grid [0, {self.grid_size - 1}]")
        return i

    def snr(self, t) -> float:
        c = self.coef(t)
        return (c.alpha / c.sigma) ** 2


def _alpha_bar(kind: str, n: int) -> np.ndarray:
    if kind == "vp-linear":
        # Stable Diffusion's "scaled linear" betas; index i has seen i steps
        betas = np.linspace(0.00085 ** 0.5, 0.012 ** 0.5, n, dtype=np.float64) ** 2
        return np.concatenate([[1.0], np.cumprod(1.0 - betas)[:-1]])
    if kind == "vp-cosine":
        off = 0.008
        u = np.arange(n, dtype=np.float64) / n
        f = np.cos((u + off) / (1 + off) * math.pi / 2) ** 2
        return f / f[0]
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


def make_schedule(kind: str = "vp-linear", grid_size: int = 1000) -> NoiseSchedule:
    if int(grid_size) != grid_size or grid_size < 2:
        raise ValueError(f"grid_size must be an integer >= 2, got {grid_size!r}")
    grid_size = int(grid_size)
    abar = _alpha_bar(kind, grid_size)

    sigma = np.maximum(np.sqrt(np.clip(1.0 - abar, 0.0, 1.0)), SIGMA_FLOOR)
    alpha = np.sqrt(1.0 - sigma ** 2)
    low = alpha < ALPHA_FLOOR
    alpha[low] = ALPHA_FLOOR
    sigma[low] = math.sqrt(1.0 - ALPHA_FLOOR ** 2)
    lam = np.log(alpha / sigma)

    for arr in (alpha, sigma, lam):
        arr.setflags(write=False)
    return NoiseSchedule(kind, alpha, sigma, lam)


def add_noise(x0, t, eps, schedule: NoiseSchedule):
    """Forward diffusion ``alpha_t * x0 + sigma_t * eps``."""
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"noise shape {np.shape(eps)} does not match sample shape {np.shape(x0)}")
    c = schedule.coef(t)
    return c.alpha * x0 + c.sigma * eps


@dataclass(frozen=True)
class TimestepTriple:
    t: int
    s: int
    e: int

    def __post_init__(self):
        if not (self.t > self.s > self.e >= 0):
            raise ValueError(f"need t > s > e >= 0, got {self}")


@dataclass(frozen=True)
class TimeSampler:
    """Warmup-aware sampler for (t, s, e) triples.

    ``t ~ U(t_min, t_max + warm)`` where ``warm`` decays linearly from
    ``warmup`` to 0 over ``warmup_epochs``; ``s = t - delta`` and
    ``e ~ U(s - delta, s - delta/10)``.
    """

    t_min: int = 20
    t_max: int = 500
    warmup: float = 480.0
    warmup_epochs: int = 1500
    grid_size: int = 1000

    def upper_bound(self, epoch: int) -> float:
        frac = max(0.0, 1.0 - epoch / self.warmup_epochs) if self.warmup_epochs > 0 else 0.0
        return self.t_max + self.warmup * frac

    def sample(self, epoch: int, delta: int, rng: np.random.Generator) -> TimestepTriple:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if delta < 10:
            raise ValueError("delta must be >= 10")
        hi = min(int(math.floor(self.upper_bound(epoch))), self.grid_size - 1)
        lo = min(self.t_min, hi)
        t = int(rng.integers(lo, hi + 1))
        t = max(t, 2)
        s = max(t - delta, 1)
        e_hi = max(s - math.ceil(delta / 10), 0)
        e_lo = max(s - delta, 0)
        e = int(rng.integers(e_lo, e_hi + 1))
        return TimestepTriple(t, s, e)


def warmup_bound(epoch: int, sampler: TimeSampler | None = None) -> float:
    return (sampler or TimeSampler()).upper_bound(epoch)


def sample_timesteps(epoch: int, delta: int, rng: np.random.Generator,
                     sampler: TimeSampler | None = None) -> TimestepTriple:
    return (sampler or TimeSampler()).sample(epoch, delta, rng)

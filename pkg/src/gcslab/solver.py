"""Probability-flow ODE machinery over the analytic teacher.

All step functions take a :class:`Denoiser` first.  Latents may be plain
arrays or tape :class:`~gcslab.tape.Node` objects; in the latter case the
teacher evaluations are recorded so losses can be differentiated.

Timesteps are integer grid indices.  Internally everything is expressed on
:class:`~gcslab.schedule.Coef` pairs so that off-grid points (the λ-midpoint
of the second-order solver, RK4 stages) use the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .oracle import NULL, GMMTeacher
from .schedule import Coef, NoiseSchedule
from .tape import Node, value_of

CFG_MODES = ("per-step", "one-step")


@dataclass(frozen=True)
class SolverConfig:
    order: int = 1
    cfg_weight: float = 7.5
    cfg_mode: str = "one-step"
    inversion_steps: int = 1        # DDIM inversion steps per ladder segment

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError(f"unsupported solver order {self.order!r}; expected 1 or 2")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")
        if self.cfg_mode not in CFG_MODES:
            raise ValueError(f"unknown cfg_mode {self.cfg_mode!r}; expected one of {CFG_MODES}")
        if int(self.inversion_steps) != self.inversion_steps or self.inversion_steps < 1:
            raise ValueError("inversion_steps must be a positive integer")


class Denoiser:
    """ε-prediction of a frozen teacher on a fixed schedule.

    ``w`` is the guidance weight of ``ε_∅ + w (ε_y − ε_∅)``; ``w = 1`` is the
    plain conditional prediction and ``y = None`` ignores ``w``.
    """

    def __init__(self, teacher: GMMTeacher, schedule: NoiseSchedule):
        self.teacher = teacher
        self.schedule = schedule

    def coef(self, t) -> Coef:
        return self.schedule.coef(t)

    def eps_value(self, x: np.ndarray, c: Coef, y=NULL, w: float = 1.0) -> np.ndarray:
        if y is NULL or w == 1.0:
            return self.teacher.eps_at(x, c, y)
        e_null = self.teacher.eps_at(x, c, NULL)
        if w == 0.0:
            return e_null
        return e_null + w * (self.teacher.eps_at(x, c, y) - e_null)

    def eps_vjp(self, x: np.ndarray, c: Coef, y, w: float, g: np.ndarray) -> np.ndarray:
        # the ε Jacobian is symmetric, so the VJP is the JVP
        if y is NULL or w == 1.0:
            return self.teacher.eps_jvp_at(x, c, y, g)
        out = (1.0 - w) * self.teacher.eps_jvp_at(x, c, NULL, g)
        if w != 0.0:
            out = out + w * self.teacher.eps_jvp_at(x, c, y, g)
        return out

    def eps(self, x, t, y=NULL, w: float = 1.0):
        c = self.coef(t)
        xv = value_of(x)
        val = self.eps_value(xv, c, y, w)
        if isinstance(x, Node):
            return x.tape.apply("eps", x, val, lambda g: self.eps_vjp(xv, c, y, w, g))
        return val


class RecordingDenoiser(Denoiser):
    """Denoiser that logs every ε value it returns, in call order."""

    def __init__(self, teacher, schedule):
        super().__init__(teacher, schedule)
        self.record: list[np.ndarray] = []

    def eps_value(self, x, c, y=NULL, w=1.0):
        val = super().eps_value(x, c, y, w)
        self.record.append(val.copy())
        return val


class ReplayDenoiser(Denoiser):
    """Returns previously recorded ε values regardless of input.

    Evaluating a loss through this denoiser gives the frozen-teacher
    surrogate whose exact gradient is the stop-gradient gradient.
    """

    def __init__(self, teacher, schedule, record):
        super().__init__(teacher, schedule)
        self._record = list(record)
        self._pos = 0

    def eps_value(self, x, c, y=NULL, w=1.0):
        if self._pos >= len(self._record):
            raise RuntimeError("replay exhausted: call sequence differs from the recording")
        val = self._record[self._pos]
        self._pos += 1
        if val.shape != np.shape(x):
            raise RuntimeError("replay shape mismatch: call sequence differs from the recording")
        return val

    def eps_vjp(self, x, c, y, w, g):
        return np.zeros_like(g)


# -- single steps on coefficients ---------------------------------------

def _f_pred_c(model: Denoiser, x, c: Coef, y, w):
    return (x - c.sigma * model.eps(x, c, y, w)) / c.alpha


def _ddim_c(model: Denoiser, x, ct: Coef, cs: Coef, y, w):
    eps = model.eps(x, ct, y, w)
    x0 = (x - ct.sigma * eps) / ct.alpha
    return cs.alpha * x0 + cs.sigma * eps


def first_order_update(x_t, pred, ct: Coef, cs: Coef):
    """Exponential-integrator update ``(σ_s/σ_t) x_t − α_s (e^{−h} − 1) pred``.

    With ``pred`` the data prediction this is the first-order DPM-Solver++
    step, identical to DDIM under VP.
    """
    h = cs.log_snr - ct.log_snr
    return (cs.sigma / ct.sigma) * x_t - (cs.alpha * math.expm1(-h)) * pred


def _g_c(model: Denoiser, x, ct: Coef, cs: Coef, y, w, order: int):
    if order == 1:
        return first_order_update(x, _f_pred_c(model, x, ct, y, w), ct, cs)
    if order == 2:
        # midpoint in λ (single extra evaluation)
        cm = Coef.from_log_snr(0.5 * (ct.log_snr + cs.log_snr))
        u = first_order_update(x, _f_pred_c(model, x, ct, y, w), ct, cm)
        return first_order_update(x, _f_pred_c(model, u, cm, y, w), ct, cs)
    raise ValueError(f"unsupported solver order {order!r}; expected 1 or 2")


# -- public grid-index API ---------------------------------------------------

def _idx(model: Denoiser, t) -> int:
    return model.schedule.index(t)


def f_pred(model: Denoiser, x_t, t, y=NULL, w: float = 1.0):
    """One-step clean prediction ``F = (x_t − σ_t ε̂)/α_t``."""
    return _f_pred_c(model, x_t, model.coef(t), y, w)


def ddim_step(model: Denoiser, x_t, t, s, y=NULL, w: float = 1.0):
    t, s = _idx(model, t), _idx(model, s)
    if s > t:
        raise ValueError(f"ddim_step needs s <= t (got t={t}, s={s}); use ddim_invert_step")
    if s == t:
        return x_t
    return _ddim_c(model, x_t, model.coef(t), model.coef(s), y, w)


def ddim_invert_step(model: Denoiser, x_s, s, t, y=NULL, w: float = 1.0,
                     allow_condition: bool = False):
    """DDIM update run forward in noise level, ε taken at the current point."""
    s, t = _idx(model, s), _idx(model, t)
    if t < s:
        raise ValueError(f"ddim_invert_step needs t >= s (got s={s}, t={t})")
    if y is not NULL and not allow_condition:
        raise ValueError("inversion is null-conditioned; pass allow_condition=True to override")
    if t == s:
        return x_s
    return _ddim_c(model, x_s, model.coef(s), model.coef(t), y, w)


def index_ladder(start: int, stop: int, n_steps: int) -> list[int]:
    """Uniformly spaced integer grid indices from ``start`` to ``stop`` inclusive."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    pts = np.rint(np.linspace(start, stop, n_steps + 1)).astype(int)
    return [int(v) for v in pts]


def invert_ladder(model: Denoiser, x_e, e, s, t, steps_per_segment: int = 1):
    """Null-conditioned inversion e → s → t; returns ``(x̂_s, x̂_t)``."""
    e, s, t = _idx(model, e), _idx(model, s), _idx(model, t)
    if not e <= s <= t:
        raise ValueError(f"inversion ladder needs e <= s <= t (got {e}, {s}, {t})")
    x = x_e
    for a, b in _pairs(index_ladder(e, s, steps_per_segment)):
        x = ddim_invert_step(model, x, a, b)
    x_s = x
    for a, b in _pairs(index_ladder(s, t, steps_per_segment)):
        x = ddim_invert_step(model, x, a, b)
    return x_s, x


def _pairs(ladder):
    return zip(ladder[:-1], ladder[1:])


def g_solution(model: Denoiser, x_t, t, s, y=NULL, order: int = 1, w: float = 1.0):
    """Solution function jumping the PF-ODE from ``t`` to ``s`` in one solver step."""
    t, s = _idx(model, t), _idx(model, s)
    if order not in (1, 2):
        raise ValueError(f"unsupported solver order {order!r}; expected 1 or 2")
    if s > t:
        raise ValueError(f"g_solution needs s <= t (got t={t}, s={s})")
    if s == t:
        return x_t
    return _g_c(model, x_t, model.coef(t), model.coef(s), y, w, order)


def run_trajectory(model: Denoiser, x_t, t, e, n_steps: int, y=NULL, cfg_weight: float = 1.0,
                   cfg_mode: str = "per-step", cfg_step: int = 0, order: int = 1):
    """Multi-step solve from ``t`` down to ``e`` on a uniform index ladder.

    ``per-step`` guides every step with ``cfg_weight``; ``one-step`` guides only
    step number ``cfg_step`` and uses the plain conditional elsewhere.
    """
    t, e = _idx(model, t), _idx(model, e)
    if e > t:
        raise ValueError(f"run_trajectory needs e <= t (got t={t}, e={e})")
    if cfg_mode not in CFG_MODES:
        raise ValueError(f"unknown cfg_mode {cfg_mode!r}")
    x = x_t
    for k, (a, b) in enumerate(_pairs(index_ladder(t, e, n_steps))):
        w = cfg_weight if cfg_mode == "per-step" or k == cfg_step else 1.0
        if order == 1:
            x = ddim_step(model, x, a, b, y, w)
        else:
            x = g_solution(model, x, a, b, y, order, w)
    return x


def rk4_reference(model: Denoiser, x_t, t, e, n_substeps: int = 2000, y=NULL, w: float = 1.0,
                  ct: Coef | None = None, ce: Coef | None = None) -> np.ndarray:
    """Classic RK4 on ``dx/dλ = −α² x + α x̂₀(x, λ)`` from λ_t to λ_e.

    ``ct``/``ce`` override the endpoint coefficients (used for off-grid checks).
    """
    if n_substeps < 100:
        raise ValueError("n_substeps must be >= 100")
    ct = ct or model.coef(t)
    ce = ce or model.coef(e)
    x = np.array(value_of(x_t), dtype=np.float64)
    l0, l1 = ct.log_snr, ce.log_snr
    if l0 == l1:
        return x
    h = (l1 - l0) / n_substeps

    def f(xv, lam):
        c = Coef.from_log_snr(lam)
        x0 = (xv - c.sigma * model.eps_value(xv, c, y, w)) / c.alpha
        return -c.alpha ** 2 * xv + c.alpha * x0

    for i in range(n_substeps):
        lam = l0 + i * h
        k1 = f(x, lam)
        k2 = f(x + 0.5 * h * k1, lam + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, lam + 0.5 * h)
        k4 = f(x + h * k3, lam + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x

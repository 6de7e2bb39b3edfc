"""Distillation losses on a rendered latent ``x_π``.

Every loss is a weighted sum of squared gaps ``‖A − B‖²`` between a
*student* branch ``A`` and a *target* branch ``B``, both built from teacher
evaluations along diffusion trajectories of ``x_π``.

Gradient contract
-----------------
``stop-grad``
    Teacher ε evaluations are constants and the target branch is detached;
    the gradient flows only through the affine (α/σ coefficient) dependence
    of the student branch on ``x_π``: ``2 c (∂A/∂x_π)ᵀ (A − B)``.
``exact-jacobian``
    Both branches are differentiated through the analytic ε Jacobian, giving
    the true gradient of the loss value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .oracle import NULL
from .renderer import Decoder
from .schedule import TimestepTriple, add_noise
from .solver import (Denoiser, SolverConfig, ddim_step, f_pred, g_solution,
                     invert_ladder)
from .tape import Node, Tape, value_of

BASE_KINDS = ("sds", "sds-cfg", "csd", "isd", "isd-cfg", "cds", "cc", "cg", "cp", "gcs", "brighten")
GCS_TERMS = ("cc", "cg", "cp")
WEIGHTINGS = ("unit", "snr")
GRAD_MODES = ("stop-grad", "exact-jacobian")


def parse_kind(kind: str) -> tuple[str, ...] | None:
    """GCS sub-terms selected by ``kind`` (``"gcs"``, ``"cc+cg"``, ...); ``None`` otherwise."""
    if kind == "gcs":
        return GCS_TERMS
    parts = tuple(kind.split("+"))
    if all(p in GCS_TERMS for p in parts) and len(set(parts)) == len(parts):
        return parts
    return None


@dataclass(frozen=True)
class LossSpec:
    kind: str = "gcs"
    w: float = 7.5
    w_cc: float = 1.0
    w_cg: float = 1.0
    w_cp: float = 1.0
    weighting: str = "unit"
    grad_mode: str = "stop-grad"
    cg_cfg_weight: float = 7.5

    def __post_init__(self):
        if self.kind not in BASE_KINDS and parse_kind(self.kind) is None:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        for name in ("w", "w_cc", "w_cg", "w_cp", "cg_cfg_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss.{name} must be >= 0")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTINGS}")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}; expected one of {GRAD_MODES}")

    @property
    def uses_pinned_noise(self) -> bool:
        return self.kind in ("isd", "isd-cfg") or parse_kind(self.kind) is not None


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    diagnostics: dict[str, float] = field(default_factory=dict)
    terms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def grad_x_pi(self) -> np.ndarray:
        return self.grad


@dataclass
class LossContext:
    model: Denoiser
    solver: SolverConfig = SolverConfig()
    decoder: Decoder | None = None


@dataclass
class _Term:
    name: str
    weight: float
    student: object          # array or Node
    target: object


def _c(ctx: LossContext, spec: LossSpec, t) -> float:
    return 1.0 if spec.weighting == "unit" else ctx.model.schedule.snr(t)


def _decode(ctx: LossContext, x):
    dec = ctx.decoder
    if dec is None:
        raise ValueError("this loss needs a decoder")
    xv = value_of(x)
    val = dec.decode(xv)
    if isinstance(x, Node):
        return x.tape.apply("decode", x, val, lambda g: dec.vjp(xv, g))
    return val


# -- term builders: pure formulas over arrays or nodes ---------------------

def _sds_terms(ctx, spec, xp, triple, y, eps, guided: bool):
    m = ctx.model
    t = triple.t
    x_t = add_noise(xp, t, eps, m.schedule)
    c = _c(ctx, spec, t)
    if not guided:
        return [_Term("sds", c, xp, f_pred(m, x_t, t, y))], {}
    f_y = f_pred(m, x_t, t, y)
    f_null = f_pred(m, x_t, t, NULL)
    # x_π − [F_y − w (F_∅ − F_y)]
    target = f_y - spec.w * (f_null - f_y)
    gen = value_of(xp) - value_of(f_y)
    cls = spec.w * (value_of(f_null) - value_of(f_y))
    diag = {"generator": gen, "classifier": cls}
    return [_Term("sds-cfg", c, xp, target)], diag


def _csd_terms(ctx, spec, xp, triple, y, eps):
    m = ctx.model
    t = triple.t
    x_t = add_noise(xp, t, eps, m.schedule)
    return [_Term("csd", _c(ctx, spec, t), f_pred(m, x_t, t, NULL), f_pred(m, x_t, t, y))], {}


def _isd_terms(ctx, spec, xp, triple, y, eps, guided: bool):
    m = ctx.model
    t, s = triple.t, triple.s
    if t < s:
        raise ValueError(f"isd needs t > s (got t={t}, s={s})")
    x_0 = add_noise(xp, 0, eps, m.schedule)
    x_s, x_t = invert_ladder(m, x_0, 0, s, t, ctx.solver.inversion_steps)
    w = spec.w if guided else 1.0
    name = "isd-cfg" if guided else "isd"
    return [_Term(name, _c(ctx, spec, t), f_pred(m, x_s, s, NULL), f_pred(m, x_t, t, y, w))], {}


def _cds_terms(ctx, spec, xp, triple, y, eps):
    m = ctx.model
    t, s = triple.t, triple.s
    if t < s:
        raise ValueError(f"cds needs t > s (got t={t}, s={s})")
    x_t = add_noise(xp, t, eps, m.schedule)
    x_bar = ddim_step(m, x_t, t, s, y, spec.w)
    return [_Term("cds", _c(ctx, spec, t), f_pred(m, x_t, t, y), f_pred(m, x_bar, s, y))], {}


def _gcs_terms(ctx, spec, xp, triple, y, eps, parts, weights):
    m = ctx.model
    t, s, e = triple.t, triple.s, triple.e
    if not t >= s >= e >= 0:
        raise ValueError(f"need t >= s >= e >= 0 (got {t}, {s}, {e})")
    order = ctx.solver.order
    x_e = add_noise(xp, e, eps, m.schedule)
    _, x_t = invert_ladder(m, x_e, e, s, t, ctx.solver.inversion_steps)
    terms = []
    if "cc" in parts:
        x_bar = ddim_step(m, x_t, t, s, y, spec.w)
        if ctx.solver.cfg_mode == "one-step":
            a = g_solution(m, x_t, t, e, NULL, order)
            b = g_solution(m, x_bar, s, e, NULL, order)
        else:
            a = g_solution(m, x_t, t, e, y, order, spec.w)
            b = g_solution(m, x_bar, s, e, y, order, spec.w)
        terms.append(_Term("cc", weights["cc"], a, b))
    if "cg" in parts or "cp" in parts:
        x_tilde = f_pred(m, x_e, e, NULL)
        x_dot = f_pred(m, g_solution(m, x_t, t, e, y, order, spec.cg_cfg_weight), e, y)
        if "cg" in parts:
            terms.append(_Term("cg", weights["cg"], x_tilde, x_dot))
        if "cp" in parts:
            terms.append(_Term("cp", weights["cp"], _decode(ctx, x_tilde), _decode(ctx, x_dot)))
    return terms, {}


def _brighten_terms(ctx, spec, xp):
    # synthetic driver pulling every decoded pixel towards white
    d = _decode(ctx, xp)
    return [_Term("brighten", 1.0, d, np.ones_like(value_of(d)))], {}


def build_terms(ctx: LossContext, spec: LossSpec, xp, triple: TimestepTriple, y, eps):
    kind = spec.kind
    if kind in ("sds", "sds-cfg"):
        return _sds_terms(ctx, spec, xp, triple, y, eps, kind == "sds-cfg")
    if kind == "csd":
        return _csd_terms(ctx, spec, xp, triple, y, eps)
    if kind in ("isd", "isd-cfg"):
        return _isd_terms(ctx, spec, xp, triple, y, eps, kind == "isd-cfg")
    if kind == "cds":
        return _cds_terms(ctx, spec, xp, triple, y, eps)
    if kind == "brighten":
        return _brighten_terms(ctx, spec, xp)
    parts = parse_kind(kind)
    if kind == "gcs":
        weights = {"cc": spec.w_cc, "cg": spec.w_cg, "cp": spec.w_cp}
    elif len(parts) == 1:
        weights = {parts[0]: 1.0}
    else:
        weights = {"cc": spec.w_cc, "cg": spec.w_cg, "cp": spec.w_cp}
    if "cp" in parts and ctx.decoder is None and weights.get("cp", 0.0) == 0.0:
        parts = tuple(p for p in parts if p != "cp")
    return _gcs_terms(ctx, spec, xp, triple, y, eps, parts, weights)


def compute_loss(ctx: LossContext, spec: LossSpec, x_pi, triple: TimestepTriple, y, eps) -> LossResult:
    """Loss value and its gradient with respect to ``x_π`` under ``spec.grad_mode``."""
    x_pi = np.asarray(x_pi, dtype=np.float64)
    if eps is not None and np.shape(eps) != x_pi.shape:
        raise ValueError(f"noise shape {np.shape(eps)} does not match latent shape {x_pi.shape}")
    exact = spec.grad_mode == "exact-jacobian"
    tape = Tape() if exact else Tape(frozen={"eps"})
    xp = tape.leaf(x_pi)
    terms, vectors = build_terms(ctx, spec, xp, triple, y, eps)
    diag = {f"{k}_sq": float(np.sum(v ** 2)) for k, v in vectors.items()}

    value = 0.0
    seeds = []
    out_terms = {}
    for term in terms:
        a, b = value_of(term.student), value_of(term.target)
        r = a - b
        raw = float(np.sum(r * r))
        diag[term.name] = raw
        value += term.weight * raw
        out_terms[term.name] = (np.array(a), np.array(b))
        if isinstance(term.student, Node):
            seeds.append((term.student, 2.0 * term.weight * r))
        if exact and isinstance(term.target, Node):
            seeds.append((term.target, -2.0 * term.weight * r))
    grad = tape.backward(seeds, xp)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite {spec.kind} loss: value={value}, terms={diag}")
    return LossResult(float(value), grad, diag, out_terms, vectors)


def term_values(ctx: LossContext, spec: LossSpec, x_pi, triple: TimestepTriple, y, eps):
    """Untaped evaluation: ``{name: (weight, student, target)}``."""
    terms, _ = build_terms(ctx, spec, np.asarray(x_pi, dtype=np.float64), triple, y, eps)
    return {t.name: (t.weight, np.asarray(t.student), np.asarray(t.target)) for t in terms}


def loss_value(ctx: LossContext, spec: LossSpec, x_pi, triple: TimestepTriple, y, eps) -> float:
    return float(sum(w * np.sum((a - b) ** 2) for w, a, b in term_values(ctx, spec, x_pi, triple, y, eps).values()))


# -- named entry points ---------------------------------------------------------
#
# These mirror the per-loss signatures.  ``strict=False`` admits the degenerate
# orderings (t == s, s == e) that make both branches coincide.

def _spec(spec: LossSpec | None, kind: str) -> LossSpec:
    if spec is None:
        return LossSpec(kind=kind)
    if spec.kind != kind:
        spec = LossSpec(kind, spec.w, spec.w_cc, spec.w_cg, spec.w_cp, spec.weighting,
                        spec.grad_mode, spec.cg_cfg_weight)
    return spec


def _ts(t, s=None, e=None) -> TimestepTriple:
    # unchecked triple
    trip = object.__new__(TimestepTriple)
    object.__setattr__(trip, "t", int(t))
    object.__setattr__(trip, "s", int(t if s is None else s))
    object.__setattr__(trip, "e", int(0 if e is None else e))
    return trip


def _ordered(t, s, strict, name):
    if strict and not t > s:
        raise ValueError(f"{name} needs t > s (got t={t}, s={s})")


def _triple(triple, strict: bool, name: str) -> TimestepTriple:
    if isinstance(triple, TimestepTriple):
        return triple
    t, s, e = triple
    if strict:
        if name == "cg":
            if not t > e >= 0 or not t >= s >= e:
                raise ValueError(f"cg needs t > e >= 0 (got {triple})")
        else:
            return TimestepTriple(int(t), int(s), int(e))
    return _ts(t, s, e)


def sds(ctx, x_pi, t, y, eps, spec=None) -> LossResult:
    return compute_loss(ctx, _spec(spec, "sds"), x_pi, _ts(t), y, eps)


def sds_cfg(ctx, x_pi, t, y, eps, spec=None) -> LossResult:
    return compute_loss(ctx, _spec(spec, "sds-cfg"), x_pi, _ts(t), y, eps)


def csd(ctx, x_pi, t, y, eps, spec=None) -> LossResult:
    return compute_loss(ctx, _spec(spec, "csd"), x_pi, _ts(t), y, eps)


def isd(ctx, x_pi, t, s, y, eps_star, spec=None, strict=True) -> LossResult:
    _ordered(t, s, strict, "isd")
    return compute_loss(ctx, _spec(spec, "isd"), x_pi, _ts(t, s), y, eps_star)


def isd_cfg(ctx, x_pi, t, s, y, eps_star, spec=None, strict=True) -> LossResult:
    _ordered(t, s, strict, "isd-cfg")
    return compute_loss(ctx, _spec(spec, "isd-cfg"), x_pi, _ts(t, s), y, eps_star)


def cds(ctx, x_pi, t, s, y, eps, spec=None, strict=True) -> LossResult:
    _ordered(t, s, strict, "cds")
    return compute_loss(ctx, _spec(spec, "cds"), x_pi, _ts(t, s), y, eps)


def cc(ctx, x_pi, triple, y, eps_star, spec=None, strict=True) -> LossResult:
    return compute_loss(ctx, _spec(spec, "cc"), x_pi, _triple(triple, strict, "cc"), y, eps_star)


def cg(ctx, x_pi, triple, y, eps_star, spec=None, strict=True) -> LossResult:
    return compute_loss(ctx, _spec(spec, "cg"), x_pi, _triple(triple, strict, "cg"), y, eps_star)


def cp(ctx, x_pi, triple, y, eps_star, spec=None, strict=True) -> LossResult:
    return compute_loss(ctx, _spec(spec, "cp"), x_pi, _triple(triple, strict, "cp"), y, eps_star)


def gcs(ctx, x_pi, triple, y, eps_star, spec=None, strict=True) -> LossResult:
    return compute_loss(ctx, _spec(spec, "gcs"), x_pi, _triple(triple, strict, "gcs"), y, eps_star)

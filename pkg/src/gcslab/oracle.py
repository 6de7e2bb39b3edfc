"""Analytic Gaussian-mixture diffusion teacher.

The data distribution is a mixture of isotropic Gaussians
``sum_k w_k N(mu_k, v_k I)``.  Under ``x_t = alpha x_0 + sigma eps`` the noisy
marginal stays a mixture, so the posterior mean ``E[x_0 | x_t]``, the noise
prediction and its Jacobian are all available in closed form.

Conditions are string labels mapping to subsets of components; ``None`` is
the null condition and always selects every component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import Coef, NoiseSchedule

NULL = None
MAX_JACOBIAN_DIM = 4096


@dataclass(frozen=True, eq=False)
class GMMTeacher:
    weights: np.ndarray        # (K,) global weights, renormalised per condition
    variances: np.ndarray      # (K,)
    means: np.ndarray          # (K, D)
    condition_map: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if w.ndim != 1 or v.shape != w.shape or m.shape[0] != w.shape[0]:
            raise ValueError("weights, variances and means disagree on component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        cmap = {}
        for label, idx in dict(self.condition_map).items():
            _check_label(label)
            idx = tuple(int(i) for i in idx)
            if not idx:
                raise ValueError(f"condition {label!r} selects no components")
            if min(idx) < 0 or max(idx) >= len(w) or len(set(idx)) != len(idx):
                raise ValueError(f"condition {label!r} has invalid component indices {idx}")
            cmap[label] = idx
        for arr in (w, v, m):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "condition_map", cmap)

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.condition_map)

    def subset(self, y) -> tuple[np.ndarray, np.ndarray]:
        """Component indices and renormalised weights for condition ``y``."""
        if y is NULL:
            idx = np.arange(self.n_components)
        else:
            try:
                idx = np.asarray(self.condition_map[y])
            except KeyError:
                raise KeyError(f"unknown condition label {y!r}") from None
        w = self.weights[idx]
        return idx, w / w.sum()

    def conditioned_means(self, y) -> np.ndarray:
        idx, _ = self.subset(y)
        return self.means[idx]

    def mixture_mean(self, y) -> np.ndarray:
        idx, w = self.subset(y)
        return w @ self.means[idx]

    # -- closed-form quantities at coefficients (alpha, sigma) ------------

    def _stats(self, x: np.ndarray, coef: Coef, y):
        idx, w = self.subset(y)
        a, s = coef
        mu = self.means[idx]
        var = self.variances[idx]
        S = a * a * var + s * s                       # marginal variance per component
        diff = x[None, :] - a * mu                    # (K, D)
        sq = np.einsum("kd,kd->k", diff, diff)
        logp = np.log(w) - 0.5 * sq / S - 0.5 * self.dim * np.log(2 * math.pi * S)
        r = np.exp(logp - logsumexp(logp))
        return idx, mu, var, S, diff, r, logp

    def posterior_mean_at(self, x, coef: Coef, y=NULL) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1)
        _, mu, var, S, diff, r, _ = self._stats(flat, coef, y)
        gain = coef.alpha * var / S                   # per-component shrinkage
        comp = mu + gain[:, None] * diff
        return (r @ comp).reshape(x.shape)

    def eps_at(self, x, coef: Coef, y=NULL) -> np.ndarray:
        # (x − α E)/σ rewritten as σ Σ r_k (x − α μ_k)/S_k: no division by a tiny σ
        x = np.asarray(x, dtype=np.float64)
        _, _, _, S, diff, r, _ = self._stats(x.reshape(-1), coef, y)
        return (coef.sigma * ((r / S) @ diff)).reshape(x.shape)

    def posterior_mean_jvp_at(self, x, coef: Coef, y, v) -> np.ndarray:
        """Jacobian of the posterior mean applied to ``v`` (the Jacobian is symmetric)."""
        x = np.asarray(x, dtype=np.float64)
        flat_v = np.asarray(v, dtype=np.float64).reshape(-1)
        _, mu, var, S, diff, r, _ = self._stats(x.reshape(-1), coef, y)
        a, s = coef
        gain = a * var / S
        g = -diff / S[:, None]                        # grad log N_k at x
        gbar = r @ g
        gv = g @ flat_v
        cov_v = (r * gv) @ g - gbar * (gbar @ flat_v)
        out = (r @ gain) * flat_v + (s * s / a) * cov_v
        return out.reshape(np.shape(v))

    def eps_jvp_at(self, x, coef: Coef, y, v) -> np.ndarray:
        # (I − α J_E)/σ = σ (Σ r_k/S_k · I − Cov(g))
        x = np.asarray(x, dtype=np.float64)
        flat_v = np.asarray(v, dtype=np.float64).reshape(-1)
        _, _, _, S, diff, r, _ = self._stats(x.reshape(-1), coef, y)
        g = -diff / S[:, None]
        gbar = r @ g
        cov_v = (r * (g @ flat_v)) @ g - gbar * (gbar @ flat_v)
        return (coef.sigma * ((r @ (1.0 / S)) * flat_v - cov_v)).reshape(np.shape(v))

    def log_density_at(self, x, coef: Coef, y=NULL) -> float:
        """log p_t(x) of the noisy marginal."""
        *_, logp = self._stats(np.asarray(x, dtype=np.float64).reshape(-1), coef, y)
        return float(logsumexp(logp))

    def dense_eps_jacobian_at(self, x, coef: Coef, y=NULL) -> np.ndarray:
        d = self.dim
        if d > MAX_JACOBIAN_DIM:
            raise ValueError(f"latent dimension {d} exceeds dense Jacobian cap {MAX_JACOBIAN_DIM}")
        _, mu, var, S, diff, r, _ = self._stats(np.asarray(x, dtype=np.float64).reshape(-1), coef, y)
        a, s = coef
        g = -diff / S[:, None]
        gbar = r @ g
        cov = (g.T * r) @ g - np.outer(gbar, gbar)
        return s * ((r @ (1.0 / S)) * np.eye(d) - cov)


def _check_label(label):
    if not isinstance(label, str) or not label or any(c.isspace() or c == "," for c in label) or label == "-":
        raise ValueError(f"invalid condition label {label!r}")


def build_teacher(target_views: Sequence[np.ndarray], distractor_views: Sequence[np.ndarray] = (),
                  variance: float = 0.05 ** 2, label: str = "target") -> GMMTeacher:
    """One component per view image; ``label`` selects the targets, ``None`` selects all."""
    if len(target_views) == 0:
        raise ValueError("need at least one target view")
    if variance <= 0:
        raise ValueError("variance must be positive")
    views = [np.asarray(v, dtype=np.float64).reshape(-1) for v in (*target_views, *distractor_views)]
    if len({v.shape for v in views}) != 1:
        raise ValueError("all views must have the same size")
    k = len(views)
    return GMMTeacher(
        weights=np.full(k, 1.0 / k),
        variances=np.full(k, float(variance)),
        means=np.stack(views),
        condition_map={label: tuple(range(len(target_views)))},
    )


def _coef(t, schedule: NoiseSchedule | None) -> Coef:
    if isinstance(t, Coef):
        return t
    if schedule is None:
        raise ValueError("a schedule is required to resolve grid timestep")
    return schedule.coef(t)


def posterior_mean(teacher: GMMTeacher, x_t, t, y=NULL, schedule: NoiseSchedule | None = None):
    return teacher.posterior_mean_at(x_t, _coef(t, schedule), y)


def epsilon(teacher: GMMTeacher, x_t, t, y=NULL, schedule: NoiseSchedule | None = None):
    return teacher.eps_at(x_t, _coef(t, schedule), y)


def epsilon_cfg(teacher: GMMTeacher, x_t, t, y, w: float, schedule: NoiseSchedule | None = None):
    """Classifier-free guidance ``eps_null + w (eps_y - eps_null)``."""
    if w < 0:
        raise ValueError("guidance weight must be >= 0")
    c = _coef(t, schedule)
    e_null = teacher.eps_at(x_t, c, NULL)
    if w == 0:
        return e_null
    e_y = teacher.eps_at(x_t, c, y)
    if w == 1:
        return e_y
    return e_null + w * (e_y - e_null)


def score_jacobian(teacher: GMMTeacher, x_t, t, y=NULL, schedule: NoiseSchedule | None = None):
    """Dense ``d eps / d x_t`` over the flattened latent."""
    return teacher.dense_eps_jacobian_at(x_t, _coef(t, schedule), y)


# -- text serialisation ----------------------------------------------------

def format_teacher(teacher: GMMTeacher) -> str:
    tags: list[list[str]] = [[] for _ in range(teacher.n_components)]
    for label, idx in teacher.condition_map.items():
        for i in idx:
            tags[i].append(label)
    lines = [f"{teacher.n_components} {teacher.dim}"]
    for k in range(teacher.n_components):
        fields = [repr(float(teacher.weights[k])), repr(float(teacher.variances[k]))]
        fields += [repr(float(v)) for v in teacher.means[k]]
        fields.append(",".join(tags[k]) if tags[k] else "-")
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def parse_teacher(text: str) -> GMMTeacher:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty teacher file")
    try:
        k, d = (int(v) for v in lines[0].split())
    except ValueError:
        raise ValueError(f"bad teacher header {lines[0]!r}") from None
    if len(lines) != k + 1:
        raise ValueError(f"expected {k} component lines, found {len(lines) - 1}")
    weights, variances, means = [], [], []
    cmap: dict[str, list[int]] = {}
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != d + 3:
            raise ValueError(f"component line {i} has {len(parts)} fields, expected {d + 3}")
        weights.append(float(parts[0]))
        variances.append(float(parts[1]))
        means.append([float(v) for v in parts[2:2 + d]])
        if parts[-1] != "-":
            for label in parts[-1].split(","):
                cmap.setdefault(label, []).append(i)
    return GMMTeacher(np.array(weights), np.array(variances), np.array(means).reshape(k, d),
                      {lab: tuple(ix) for lab, ix in cmap.items()})


def save_teacher(teacher: GMMTeacher, path) -> None:
    Path(path).write_text(format_teacher(teacher), encoding="utf-8")


def load_teacher(path) -> GMMTeacher:
    return parse_teacher(Path(path).read_text(encoding="utf-8"))

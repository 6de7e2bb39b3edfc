"""Experiment drivers behind the CLI: Δt sweeps, the solver-bound fit,
loss ablations, the BEG A/B comparison and tidy plot-data files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import linregress

from .config import DEFAULTS, ConfigError, RunConfig
from .oracle import GMMTeacher
from .schedule import make_schedule
from .solver import Denoiser, rk4_reference, run_trajectory
from .trainer import train

PLOT_KINDS = ("loss", "brightness", "slope", "ablation")
DEFAULT_DELTAS = (25, 50, 100, 200)
DEFAULT_ABLATION = ("sds", "isd", "cds", "cc+cg", "gcs")
SPAN_ENDS = (700, 500, 300, 100)


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    base: Mapping[str, Any]
    swept: str
    values: tuple
    seeds: int = 1
    description: str = ""

    def __post_init__(self):
        if self.swept not in DEFAULTS:
            raise ValueError(f"preset {self.name!r} sweeps unknown key {self.swept!r}")
        if not self.values:
            raise ValueError(f"preset {self.name!r} needs at least one swept value")
        RunConfig(self.base)

    def config(self) -> RunConfig:
        return RunConfig(self.base)

    def config_text(self) -> str:
        lines = [f"# preset {self.name}: {self.description}",
                 f"# sweeps {self.swept} over {', '.join(map(str, self.values))}; seeds {self.seeds}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.base.items()]
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


PRESETS = {p.name: p for p in [
    ExperimentPreset("smoke", {"run.name": "smoke", "loss.kind": "gcs", "scene.n_splats": 64,
                               "run.epochs": 1500, "world.views": 1},
                     "loss.kind", ("gcs",), 1, "GCS on the 2-mode teacher, 64 splats, 1500 epochs"),
    ExperimentPreset("cfg-ablation", {"run.name": "cfg-ablation", "loss.kind": "cc", "loss.w": 7.5,
                                      "run.epochs": 500, "world.views": 1},
                     "solver.cfg_mode", ("one-step", "per-step"), 10,
                     "CC with guidance in one denoising step versus every step"),
    ExperimentPreset("cc-vs-cds", {"run.name": "cc-vs-cds", "loss.w": 7.5, "run.epochs": 500,
                                   "world.views": 1},
                     "loss.kind", ("cc", "cds"), 10, "CC against CDS under one budget"),
    ExperimentPreset("beg-ab", {"run.name": "beg-ab", "loss.kind": "brighten", "run.epochs": 200,
                                "lr.color": 0.04},
                     "beg.enabled", (False, True), 1, "brightness-inflating driver with and without BEG"),
    ExperimentPreset("ablation", {"run.name": "ablation", "run.epochs": 1500},
                     "loss.kind", DEFAULT_ABLATION, 1, "loss-family comparison"),
    ExperimentPreset("sweep-dt", {"run.name": "sweep-dt"},
                     "time.delta", DEFAULT_DELTAS, 1, "solver step size sweep for the error bound"),
]}


# -- solver error bound ----------------------------------------------------------

def bound_teacher(cfg: RunConfig) -> GMMTeacher:
    rng = np.random.default_rng(np.random.SeedSequence([cfg["bound.seed"], 5]))
    k, d = cfg["bound.components"], cfg["bound.dim"]
    means = cfg["bound.mean_scale"] * rng.standard_normal((k, d))
    return GMMTeacher(np.full(k, 1.0 / k), np.full(k, cfg["bound.variance"]), means, {"target": (0,)})


def _bound_setup(cfg: RunConfig):
    teacher = bound_teacher(cfg)
    model = Denoiser(teacher, make_schedule(cfg["schedule.kind"], cfg["schedule.steps"]))
    rng = np.random.default_rng(np.random.SeedSequence([cfg["bound.seed"], 6]))
    starts = [rng.standard_normal(teacher.dim) for _ in range(cfg["bound.starts"])]
    return model, starts


def endpoint_errors(cfg: RunConfig, deltas: Sequence[int], order: int, t: int, e: int,
                    model=None, starts=None, refs=None) -> list[float]:
    """Sup over starts of ‖trajectory endpoint − RK4 endpoint‖ for each step size."""
    if model is None:
        model, starts = _bound_setup(cfg)
    if refs is None:
        refs = [rk4_reference(model, x, t, e, cfg["bound.substeps"]) for x in starts]
    out = []
    for dt in deltas:
        if dt <= 0 or (t - e) % dt:
            raise ConfigError(f"step {dt} must divide the span {t - e}")
        n = (t - e) // dt
        out.append(max(float(np.linalg.norm(run_trajectory(model, x, t, e, n, order=order) - r))
                       for x, r in zip(starts, refs)))
    return out


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    r2: float


def loglog_fit(x, y) -> SlopeFit:
    r = linregress(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)))
    return SlopeFit(float(r.slope), float(r.stderr), float(r.intercept), float(r.rvalue ** 2))


@dataclass
class BoundReport:
    deltas: tuple[int, ...]
    errors: dict[int, list[float]]
    fits: dict[int, SlopeFit]
    span_lengths: tuple[int, ...]
    span_errors: list[float]
    span_slope: float
    span_r2: float
    tolerances: dict[int, tuple[float, float]] = field(default_factory=lambda: {1: (1.0, 0.3), 2: (2.0, 0.4)})

    def order_ok(self, order: int) -> bool:
        target, tol = self.tolerances[order]
        f = self.fits[order]
        return abs(f.slope - target) <= tol and f.r2 >= 0.95

    @property
    def span_ok(self) -> bool:
        return self.span_slope > 0 and bool(np.all(np.diff(self.span_errors) > 0))

    @property
    def ok(self) -> bool:
        return all(self.order_ok(o) for o in self.fits) and self.span_ok


def verify_bound(cfg: RunConfig, deltas: Sequence[int] = DEFAULT_DELTAS, orders=(1, 2),
                 span_delta: int = 100) -> BoundReport:
    t, e = cfg["bound.t"], cfg["bound.e"]
    model, starts = _bound_setup(cfg)
    refs = [rk4_reference(model, x, t, e, cfg["bound.substeps"]) for x in starts]
    errors, fits = {}, {}
    for order in orders:
        errors[order] = endpoint_errors(cfg, deltas, order, t, e, model, starts, refs)
        fits[order] = loglog_fit(deltas, errors[order])
    ends = [end for end in SPAN_ENDS if end < t and (t - end) % span_delta == 0]
    span_len = tuple(t - end for end in ends)
    span_err = [endpoint_errors(cfg, [span_delta], 1, t, end, model, starts)[0] for end in ends]
    lr = linregress(span_len, span_err)
    return BoundReport(tuple(deltas), errors, fits, span_len, span_err, float(lr.slope),
                       float(lr.rvalue ** 2))


def sweep_dt(cfg: RunConfig, deltas: Sequence[int] = DEFAULT_DELTAS, order: int | None = None):
    """Endpoint error per Δt plus its log-log fit, for the configured solver order."""
    order = order or cfg["solver.order"]
    errs = endpoint_errors(cfg, deltas, order, cfg["bound.t"], cfg["bound.e"])
    return errs, loglog_fit(deltas, errs)


# -- training-based experiments ----------------------------------------------------

def ablate(cfg: RunConfig, losses: Sequence[str], seeds: int = 1, out_dir: Path | None = None):
    """Train once per (loss, seed); returns ``{series: metrics rows}``."""
    table = {}
    for kind in losses:
        for k in range(seeds):
            seed = cfg["run.seed"] + k
            run_cfg = cfg.updated({"loss.kind": kind, "run.seed": seed, "world.seed": cfg["world.seed"] + k,
                                   "run.name": f"{cfg['run.name']}-{kind}-s{seed}"})
            sub = out_dir / f"{kind}-s{seed}" if out_dir is not None else None
            name = kind if seeds == 1 else f"{kind}#s{seed}"
            table[name] = train(run_cfg, sub).metrics
    return table


def beg_ab(cfg: RunConfig, out_dir: Path | None = None):
    """Same seed with BEG off and on; returns ``{"beg_off": rows, "beg_on": rows}``."""
    table = {}
    for name, enabled in (("beg_off", False), ("beg_on", True)):
        sub = out_dir / name if out_dir is not None else None
        table[name] = train(cfg.updated({"beg.enabled": enabled}), sub).metrics
    return table


def sweep_values(preset: ExperimentPreset, cfg: RunConfig | None = None, out_dir: Path | None = None):
    """Run every (value, seed) of a preset; returns ``{series: final metrics row}``."""
    cfg = cfg or preset.config()
    results = {}
    for value in preset.values:
        for k in range(preset.seeds):
            run_cfg = cfg.updated({preset.swept: value, "run.seed": cfg["run.seed"] + k,
                                   "world.seed": cfg["world.seed"] + k})
            sub = out_dir / f"{value}-s{k}" if out_dir is not None else None
            results[(value, k)] = train(run_cfg, sub).metrics[-1]
    return results


# -- plot data ---------------------------------------------------------------------

def _series(table) -> dict[str, Any]:
    if isinstance(table, Mapping):
        return dict(table)
    return {"run": table}


def plot_rows(table, kind: str) -> tuple[list[str], list[list]]:
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    series = _series(table)
    if not series or any(len(v) == 0 for v in series.values()):
        raise ValueError("plot table is empty")
    if kind == "slope":
        header = ["series", "x", "y", "slope", "intercept", "r2"]
        rows = []
        for name, data in series.items():
            fit = loglog_fit(data["x"], data["y"])
            rows += [[name, x, y, fit.slope, fit.intercept, fit.r2] for x, y in zip(data["x"], data["y"])]
        return header, rows
    header = ["series", "x", "y"]
    rows = []
    for name, metrics in series.items():
        if kind == "loss":
            for col in ("loss_total", "loss_cc", "loss_cg", "loss_cp"):
                label = col if len(series) == 1 else f"{name}:{col}"
                rows += [[label, r["epoch"], r[col]] for r in metrics]
        elif kind == "brightness":
            rows += [[name, r["epoch"], r["p85_max"]] for r in metrics]
        else:
            rows += [[name, r["epoch"], r["dist_mode_mean"]] for r in metrics]
    return header, rows


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def plotdata_text(table, kind: str) -> str:
    header, rows = plot_rows(table, kind)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def emit_plotdata(table, kind: str, path) -> Path:
    """Write a tidy CSV for ``kind`` ∈ {loss, brightness, slope, ablation}."""
    text = plotdata_text(table, kind)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    return path

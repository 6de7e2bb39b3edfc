"""Flat ``key = value`` run configuration.

Keys are dotted (``loss.kind``), values are typed by the default table below,
``#`` starts a comment.  A resolved config materialises every default and is
written back as ``run.lock`` so a run can be replayed exactly.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Iterable, Mapping

from .beg import BegConfig
from .losses import LossSpec
from .schedule import SCHEDULE_KINDS, TimeSampler
from .solver import SolverConfig

DEFAULTS: dict[str, Any] = {
    "run.name": "run",
    "run.out_root": "runs",
    "run.seed": 0,
    "run.epochs": 5000,
    "run.batch": 4,
    "run.snapshot_every": 500,
    "schedule.kind": "vp-linear",
    "schedule.steps": 1000,
    "time.t_min": 20,
    "time.t_max": 500,
    "time.warmup": 480.0,
    "time.warmup_epochs": 1500,
    "time.delta": 100,
    "loss.kind": "gcs",
    "loss.w": 7.5,
    "loss.w_cc": 1.0,
    "loss.w_cg": 1.0,
    "loss.w_cp": 1.0,
    "loss.weighting": "unit",
    "loss.grad_mode": "stop-grad",
    "loss.cg_cfg_weight": 7.5,
    "solver.order": 1,
    "solver.cfg_mode": "one-step",
    "solver.inversion_steps": 1,
    "beg.enabled": True,
    "beg.m": 85.0,
    "beg.t_gs": 0.9,
    "beg.t_b": 0.8,
    "beg.per_splat": False,
    "lr.position": 3e-3,
    "lr.color": 1.5e-2,
    "lr.scale": 3e-3,
    "lr.rotation": 3e-3,
    "lr.opacity": 6e-3,
    "scene.n_splats": 64,
    "scene.height": 16,
    "scene.width": 16,
    "scene.channels": 4,
    "world.views": 8,
    "world.ref_splats": 24,
    "world.decoy": True,
    "world.seed": 1234,
    "teacher.variance": 0.0025,
    "teacher.path": "",
    "teacher.view_conditioned": True,
    "decoder.seed": 0,
    "decoder.upsample": 2,
    "bound.dim": 16,
    "bound.components": 2,
    "bound.mean_scale": 0.5,
    "bound.variance": 0.25,
    "bound.starts": 8,
    "bound.t": 900,
    "bound.e": 100,
    "bound.substeps": 2000,
    "bound.seed": 0,
}

ENV_OUT = "GCSLAB_OUT"


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        value = raw
    else:
        text = raw.strip()
        try:
            if isinstance(default, bool):
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError
                value = low in ("true", "1", "yes")
            elif isinstance(default, int):
                value = int(text)
            elif isinstance(default, float):
                value = float(text)
            else:
                value = text
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, int):
        if int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return str(value)


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {n}: expected 'key = value', got {line.strip()!r}")
        key, raw = (p.strip() for p in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Fully-resolved run configuration (every key present, typed, validated)."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = _coerce(key, raw)
        self._values = merged
        self._validate()

    @classmethod
    def from_text(cls, text: str, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        values = parse_config_text(text)
        values.update(overrides or {})
        return cls(values)

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, overrides)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def replace(self, **dotted) -> "RunConfig":
        vals = self.as_dict()
        vals.update(dotted)
        return RunConfig(vals)

    def updated(self, mapping: Mapping[str, Any]) -> "RunConfig":
        vals = self.as_dict()
        vals.update(mapping)
        return RunConfig(vals)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def lock_text(self) -> str:
        return "".join(f"{k} = {_format(self._values[k])}\n" for k in sorted(self._values))

    # -- typed views ------------------------------------------------------

    @property
    def loss_spec(self) -> LossSpec:
        v = self._values
        return LossSpec(v["loss.kind"], v["loss.w"], v["loss.w_cc"], v["loss.w_cg"], v["loss.w_cp"],
                        v["loss.weighting"], v["loss.grad_mode"], v["loss.cg_cfg_weight"])

    @property
    def beg_config(self) -> BegConfig:
        v = self._values
        return BegConfig(v["beg.m"], v["beg.t_gs"], v["beg.t_b"], v["beg.enabled"], v["beg.per_splat"])

    @property
    def solver_config(self) -> SolverConfig:
        v = self._values
        return SolverConfig(v["solver.order"], v["loss.w"], v["solver.cfg_mode"], v["solver.inversion_steps"])

    @property
    def time_sampler(self) -> TimeSampler:
        v = self._values
        return TimeSampler(v["time.t_min"], v["time.t_max"], v["time.warmup"], v["time.warmup_epochs"],
                           v["schedule.steps"])

    @property
    def learning_rates(self) -> dict[str, float]:
        v = self._values
        return {"positions": v["lr.position"], "colors": v["lr.color"], "log_scales": v["lr.scale"],
                "rotations": v["lr.rotation"], "opacity_logits": v["lr.opacity"]}

    @property
    def canvas(self) -> tuple[int, int, int]:
        v = self._values
        return (v["scene.height"], v["scene.width"], v["scene.channels"])

    def out_dir(self) -> Path:
        root = os.environ.get(ENV_OUT) or self._values["run.out_root"]
        return Path(root) / self._values["run.name"]

    def _validate(self):
        v = self._values
        checks = [
            (v["run.epochs"] >= 1, "run.epochs must be >= 1"),
            (v["run.batch"] >= 1, "run.batch must be >= 1"),
            (v["run.snapshot_every"] >= 0, "run.snapshot_every must be >= 0"),
            (v["schedule.kind"] in SCHEDULE_KINDS, f"schedule.kind must be one of {SCHEDULE_KINDS}"),
            (v["schedule.steps"] >= 2, "schedule.steps must be >= 2"),
            (0 <= v["time.t_min"] <= v["time.t_max"], "need 0 <= time.t_min <= time.t_max"),
            (v["time.delta"] >= 10, "time.delta must be >= 10"),
            (all(lr > 0 for lr in self.learning_rates.values()), "learning rates must be > 0"),
            (v["scene.n_splats"] >= 1, "scene.n_splats must be >= 1"),
            (min(self.canvas) >= 1, "canvas dimensions must be >= 1"),
            (v["world.views"] >= 1, "world.views must be >= 1"),
            (v["world.ref_splats"] >= 1, "world.ref_splats must be >= 1"),
            (v["teacher.variance"] > 0, "teacher.variance must be > 0"),
            (v["decoder.upsample"] >= 1, "decoder.upsample must be >= 1"),
            (v["bound.dim"] >= 1 and v["bound.components"] >= 1 and v["bound.variance"] > 0
             and v["bound.starts"] >= 1, "bound.dim/components/variance/starts must be positive"),
            (0 <= v["bound.e"] < v["bound.t"] < v["schedule.steps"], "need 0 <= bound.e < bound.t < schedule.steps"),
            (v["bound.substeps"] >= 100, "bound.substeps must be >= 100"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.loss_spec, self.beg_config, self.solver_config
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_overrides(pairs: Iterable[tuple[str, str]]) -> dict[str, Any]:
    out = {}
    for key, raw in pairs:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out

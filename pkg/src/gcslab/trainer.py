"""Optimisation loop over splat parameters.

The *world* is a hidden reference splat scene and a decoy scene; their renders
from every pose bucket are the teacher's mixture means.  Training starts from
a scene sampled from one target render and distils the teacher into it.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .beg import BrightnessReport, beg_apply, beg_check
from .config import RunConfig
from .losses import LossContext, compute_loss
from .oracle import NULL, GMMTeacher, load_teacher, save_teacher
from .renderer import (Decoder, SplatScene, View, clamp_log_scales, make_decoder, make_views,
                       render, render_grad, save_scene, write_ppm)
from .schedule import make_schedule
from .solver import Denoiser

METRIC_FIELDS = ("epoch", "loss_total", "loss_cc", "loss_cg", "loss_cp",
                 "dist_mode_mean", "p85_max", "beg_triggered", "ms")
PARAM_GROUPS = ("positions", "log_scales", "rotations", "colors", "opacity_logits")


class TrainingError(RuntimeError):
    pass


# -- Adam -----------------------------------------------------------------------

@dataclass
class Adam:
    """Bias-corrected Adam with one learning rate per parameter group."""

    lrs: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step_count += 1
        k = self.step_count
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, np.zeros_like(p)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(p)) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** k)
            v_hat = v / (1 - self.beta2 ** k)
            out[name] = p - self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# -- world ---------------------------------------------------------------------

def random_scene(rng: np.random.Generator, n: int, canvas, radius: float) -> SplatScene:
    h, w, c = canvas
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    phi = rng.uniform(0, 2 * math.pi, n)
    pos = centre + np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    return SplatScene(pos, np.log(rng.uniform(0.8, 2.0, (n, 2))), rng.uniform(-math.pi, math.pi, n),
                      rng.standard_normal((n, c)), rng.uniform(1.0, 3.0, n), rng.permutation(n), canvas)


def _unit_rms(scene: SplatScene, views) -> SplatScene:
    # colour scale so the renders have unit per-entry RMS
    rms = math.sqrt(np.mean([np.mean(render(scene, v) ** 2) for v in views]))
    return scene.with_params(colors=scene.colors / rms)


@dataclass(frozen=True, eq=False)
class World:
    reference: SplatScene
    decoy: SplatScene | None
    views: tuple[View, ...]
    teacher: GMMTeacher

    def condition(self, view: View):
        return view_label(view) if view_label(view) in self.teacher.condition_map else "target"


def view_label(view: View) -> str:
    return f"view{view.pose_id}"


def build_world(cfg: RunConfig) -> World:
    rng = np.random.default_rng(np.random.SeedSequence([cfg["world.seed"], 7]))
    canvas = cfg.canvas
    views = tuple(make_views(cfg["world.views"]))
    radius = 0.35 * min(canvas[0], canvas[1])
    ref = _unit_rms(random_scene(rng, cfg["world.ref_splats"], canvas, radius), views)
    decoy = None
    if cfg["world.decoy"]:
        decoy = _unit_rms(random_scene(rng, cfg["world.ref_splats"], canvas, radius), views)
    if cfg["teacher.path"]:
        teacher = load_teacher(cfg["teacher.path"])
        if teacher.dim != int(np.prod(canvas)):
            raise TrainingError(f"teacher dimension {teacher.dim} does not match canvas {canvas}")
    else:
        targets = [render(ref, v) for v in views]
        distractors = [render(decoy, v) for v in views] if decoy is not None else []
        n = len(targets) + len(distractors)
        cmap = {"target": tuple(range(len(targets)))}
        if cfg["teacher.view_conditioned"]:
            cmap.update({view_label(v): (k,) for k, v in enumerate(views)})
        teacher = GMMTeacher(np.full(n, 1.0 / n), np.full(n, cfg["teacher.variance"]),
                             np.stack([t.reshape(-1) for t in (*targets, *distractors)]), cmap)
    return World(ref, decoy, views, teacher)


def init_scene(teacher: GMMTeacher, n_splats: int, seed: int, canvas=(16, 16, 4),
               y="target") -> SplatScene:
    """Splats sampled from a blurred conditioned teacher mode used as a density."""
    if n_splats < 1:
        raise ValueError("n_splats must be >= 1")
    h, w, c = canvas
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    mode = teacher.conditioned_means(y)[0].reshape(h, w, c)
    density = gaussian_filter(np.linalg.norm(mode, axis=2), sigma=1.0, mode="constant")
    density = np.maximum(density, 0.0)
    prob = density.reshape(-1) / density.sum()
    cells = rng.choice(h * w, size=n_splats, p=prob)
    cells[0] = int(np.argmax(density))
    rows, cols = np.divmod(cells, w)
    jitter = rng.uniform(-0.5, 0.5, (n_splats, 2))
    jitter[0] = 0.0
    pos = np.stack([cols, rows], axis=1).astype(np.float64) + jitter
    return SplatScene(pos, np.full((n_splats, 2), math.log(1.2)) + rng.normal(0, 0.05, (n_splats, 2)),
                      rng.uniform(-math.pi, math.pi, n_splats), rng.normal(0, 0.1, (n_splats, c)),
                      np.zeros(n_splats), rng.permutation(n_splats), canvas)


def mode_distance(teacher: GMMTeacher, x: np.ndarray, y) -> float:
    """Euclidean distance from a render to its nearest conditioned mixture mean."""
    means = teacher.conditioned_means(y)
    return float(np.min(np.linalg.norm(means - x.reshape(1, -1), axis=1)))


def mean_mode_distance(world: World, scene: SplatScene) -> float:
    return float(np.mean([mode_distance(world.teacher, render(scene, v), world.condition(v))
                          for v in world.views]))


def pinned_noise(seed: int, view: View, shape) -> np.ndarray:
    """ε* for one (run, view) pair; read-only so it cannot drift."""
    eps = np.random.default_rng(np.random.SeedSequence([seed, 3, view.pose_id])).standard_normal(shape)
    eps.setflags(write=False)
    return eps


def noise_hash(eps: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(eps).tobytes()).hexdigest()[:16]


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    scene: SplatScene
    metrics: list[dict]
    world: World
    initial_distance: float
    noise_hashes: dict[int, str]
    out_dir: Path | None = None

    @property
    def final_distance(self) -> float:
        return self.metrics[-1]["dist_mode_mean"]


def _zero_grads(scene: SplatScene) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in scene.params().items()}


def _dump(epoch, triple, per_term, exc) -> str:
    return (f"non-finite loss at epoch {epoch}\ntriple t={triple.t} s={triple.s} e={triple.e}\n"
            f"terms {per_term}\nerror {exc}\n")


def train(cfg: RunConfig, out_dir: Path | str | None = None, world: World | None = None,
          init: SplatScene | None = None, decoder: Decoder | None = None) -> TrainResult:
    """Run the distillation loop; writes artefacts when ``out_dir`` is given."""
    world = world or build_world(cfg)
    canvas = cfg.canvas
    shape = canvas
    schedule = make_schedule(cfg["schedule.kind"], cfg["schedule.steps"])
    decoder = decoder or make_decoder(canvas[2], cfg["decoder.seed"], cfg["decoder.upsample"])
    ctx = LossContext(Denoiser(world.teacher, schedule), cfg.solver_config, decoder)
    spec = cfg.loss_spec
    beg = cfg.beg_config
    sampler = cfg.time_sampler
    delta = cfg["time.delta"]
    seed = cfg["run.seed"]
    scene = init or init_scene(world.teacher, cfg["scene.n_splats"], seed, canvas,
                               world.condition(world.views[0]))
    adam = Adam(cfg.learning_rates)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    eps_star = {v.pose_id: pinned_noise(seed, v, shape) for v in world.views}
    hashes = {k: noise_hash(e) for k, e in eps_star.items()}

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.lock").write_text(cfg.lock_text(), encoding="utf-8")
        save_teacher(world.teacher, out / "teacher.txt")
    initial = mean_mode_distance(world, scene)
    rows: list[dict] = []
    batch = cfg["run.batch"]
    snap = cfg["run.snapshot_every"]

    for epoch in range(cfg["run.epochs"]):
        t0 = time.perf_counter()
        picks = rng.integers(0, len(world.views), size=batch)
        triple = sampler.sample(epoch, delta, rng)
        grads = _zero_grads(scene)
        total = 0.0
        per_term = {"cc": 0.0, "cg": 0.0, "cp": 0.0}
        batch_views = [world.views[int(i)] for i in picks]
        for view in batch_views:
            x = render(scene, view)
            if spec.uses_pinned_noise:
                noise = eps_star[view.pose_id]
                if noise_hash(noise) != hashes[view.pose_id]:
                    raise TrainingError(f"pinned noise for view {view.pose_id} changed")
            else:
                noise = rng.standard_normal(shape)
            try:
                res = compute_loss(ctx, spec, x, triple, world.condition(view), noise)
            except FloatingPointError as exc:
                msg = _dump(epoch, triple, per_term, exc)
                if out is not None:
                    (out / "abort.txt").write_text(msg, encoding="utf-8")
                raise TrainingError(msg) from exc
            total += res.value / batch
            for k in per_term:
                per_term[k] += res.diagnostics.get(k, 0.0) / batch
            for k, g in render_grad(scene, view, res.grad / batch).items():
                grads[k] += g
        params = adam.step(scene.params(), grads)
        params["log_scales"] = clamp_log_scales(params["log_scales"], canvas)
        scene = scene.with_params(**params)
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            msg = _dump(epoch, triple, per_term, "non-finite parameters after update")
            if out is not None:
                (out / "abort.txt").write_text(msg, encoding="utf-8")
            raise TrainingError(msg)

        report: BrightnessReport = beg_check([decoder.decode(render(scene, v)) for v in batch_views], beg)
        if beg.enabled and report.triggered:
            scene = beg_apply(scene, beg)
        dist = mean_mode_distance(world, scene)
        ms = (time.perf_counter() - t0) * 1000.0
        rows.append({"epoch": epoch, "loss_total": total, "loss_cc": per_term["cc"],
                     "loss_cg": per_term["cg"], "loss_cp": per_term["cp"], "dist_mode_mean": dist,
                     "p85_max": report.max, "beg_triggered": int(report.triggered and beg.enabled),
                     "ms": ms})
        if out is not None and snap and (epoch + 1) % snap == 0:
            save_scene(scene, out / f"scene_{epoch + 1:05d}.txt")

    for k, e in eps_star.items():
        if noise_hash(e) != hashes[k]:
            raise TrainingError(f"pinned noise for view {k} changed during the run")
    if out is not None:
        save_scene(scene, out / "scene.txt")
        write_metrics(rows, out / "metrics.csv")
        for v in world.views:
            write_ppm(out / f"pose{v.pose_id}.ppm", decoder.decode(render(scene, v)))
    return TrainResult(scene, rows, world, initial, hashes, out)


def _fmt(name, value) -> str:
    if name in ("epoch", "beg_triggered"):
        return str(int(value))
    return repr(float(value))


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow([_fmt(k, row[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def write_metrics(rows, path) -> None:
    Path(path).write_text(metrics_csv_text(rows), encoding="utf-8", newline="")


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "beg_triggered") else float(v)) for k, v in r.items()}
            for r in rows]

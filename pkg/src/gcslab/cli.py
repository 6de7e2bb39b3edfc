"""Command-line entry point.

Every subcommand takes a config (a file path or a preset name) followed by
``--dotted.key value`` overrides, resolves it, writes ``run.lock`` into the
output directory, and returns 0 on success, 2 on a config or usage error and
1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import harness
from .config import DEFAULTS, ENV_OUT, ConfigError, RunConfig, parse_overrides
from .renderer import (empty_scene, latent_preview, load_scene, make_decoder, make_views, render,
                       write_ppm)
from .trainer import TrainingError, train

ALIASES = {"loss": "loss.kind", "cfg-weight": "loss.w"}
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _parser() -> _Parser:
    p = _Parser(prog="gcslab", description="Score-distillation lab on an analytic teacher.",
                epilog="Any config key may be overridden as --key value or --key=value "
                       f"(aliases: --loss, --cfg-weight). {ENV_OUT} overrides run.out_root.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="config file or preset name")
        return s

    with_config("train", "train one scene")
    s = with_config("sweep-dt", "endpoint error against the RK4 reference per step size")
    s.add_argument("--deltas", default="25,50,100,200")
    s = with_config("ablate", "train once per loss kind and seed")
    s.add_argument("--losses", default=",".join(harness.DEFAULT_ABLATION))
    s.add_argument("--seeds", type=int, default=1)
    with_config("beg-ab", "brightness run with BEG off and on")
    with_config("verify-bound", "fit the error slopes for solver orders 1 and 2")
    with_config("sweep", "run every value and seed of a preset's swept key")
    s = sub.add_parser("render", help="render a saved scene at one pose")
    s.add_argument("scene", help="scene file or 'empty-scene'")
    s.add_argument("pose", help="pose index, e.g. 0 or pose0")
    s.add_argument("--views", type=int, default=DEFAULTS["world.views"])
    s.add_argument("--out", default=None, help="output PPM (default pose{k}.ppm in the output root)")
    s.add_argument("--decoded", action="store_true", help="write the decoded pixel image")
    s = sub.add_parser("presets", help="list presets or print one as a config file")
    s.add_argument("name", nargs="?")
    return p


def _overrides(tokens: list[str]) -> dict:
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"flag {tok} needs a value")
            key, value = body, tokens[i + 1]
            i += 2
        key = ALIASES.get(key, key)
        if key not in DEFAULTS and key.replace("-", "_") in DEFAULTS:
            key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"unrecognized flag --{body.split('=', 1)[0]}")
        pairs.append((key, value))
    return parse_overrides(pairs)


def load_config(source: str, overrides: dict) -> RunConfig:
    """Resolve a preset name or config path; ``run.out_root`` absorbs the env override."""
    if source in harness.PRESETS and not Path(source).exists():
        cfg = harness.PRESETS[source].config().updated(overrides)
    else:
        cfg = RunConfig.from_file(source, overrides)
    return cfg.updated({"run.out_root": str(cfg.out_dir().parent)})


def _write_lock(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.lock").write_text(cfg.lock_text(), encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _pose_index(text: str) -> int:
    body = text[4:] if text.startswith("pose") else text
    try:
        return int(body)
    except ValueError:
        raise ConfigError(f"pose must look like 'pose3' or '3', got {text!r}") from None


# -- subcommands -----------------------------------------------------------------

def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    res = train(cfg, out)
    print(f"{cfg['run.name']}: {cfg['run.epochs']} epochs, distance {res.initial_distance:.4g} -> "
          f"{res.final_distance:.4g}; wrote {out / 'metrics.csv'}")
    return EXIT_OK


def _deltas(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--deltas must be comma-separated integers, got {text!r}") from None
    if len(vals) < 2:
        raise ConfigError("--deltas needs at least two values for a slope fit")
    return vals


def cmd_sweep_dt(cfg: RunConfig, args, out: Path) -> int:
    deltas = _deltas(args.deltas)
    order = cfg["solver.order"]
    errs, fit = harness.sweep_dt(cfg, deltas, order)
    _write_csv(out / "sweep_dt.csv", ["delta", "error"], [[d, repr(e)] for d, e in zip(deltas, errs)])
    harness.emit_plotdata({f"order{order}": {"x": deltas, "y": errs}}, "slope", out / "slope.csv")
    for d, e in zip(deltas, errs):
        print(f"dt={d:4d}  error={e:.6e}")
    print(f"order {order}: slope {fit.slope:.3f} ± {fit.stderr:.3f}  R²={fit.r2:.4f}")
    return EXIT_OK


def cmd_verify_bound(cfg: RunConfig, args, out: Path) -> int:
    rep = harness.verify_bound(cfg)
    table = {f"order{o}": {"x": list(rep.deltas), "y": rep.errors[o]} for o in rep.fits}
    harness.emit_plotdata(table, "slope", out / "slope.csv")
    _write_csv(out / "span.csv", ["span", "error"],
               [[n, repr(e)] for n, e in zip(rep.span_lengths, rep.span_errors)])
    for o, f in rep.fits.items():
        target, tol = rep.tolerances[o]
        verdict = "ok" if rep.order_ok(o) else "FAIL"
        print(f"order {o}: slope {f.slope:.3f} ± {f.stderr:.3f}  R²={f.r2:.4f}  "
              f"(want {target} ± {tol}) {verdict}")
    print(f"span: error grows {rep.span_slope:.3e} per step, R²={rep.span_r2:.4f} "
          f"{'ok' if rep.span_ok else 'FAIL'}")
    return EXIT_OK if rep.ok else EXIT_RUNTIME


def cmd_ablate(cfg: RunConfig, args, out: Path) -> int:
    losses = [k.strip() for k in args.losses.split(",") if k.strip()]
    if not losses or args.seeds < 1:
        raise ConfigError("ablate needs at least one loss and --seeds >= 1")
    for kind in losses:
        cfg.updated({"loss.kind": kind})
    table = harness.ablate(cfg, losses, args.seeds, out)
    harness.emit_plotdata(table, "ablation", out / "ablation.csv")
    _write_csv(out / "summary.csv", ["series", "initial", "final"],
               [[name, repr(rows[0]["dist_mode_mean"]), repr(rows[-1]["dist_mode_mean"])]
                for name, rows in table.items()])
    for name, rows in table.items():
        print(f"{name:>16s}: final distance {rows[-1]['dist_mode_mean']:.4g}")
    return EXIT_OK


def cmd_beg_ab(cfg: RunConfig, args, out: Path) -> int:
    table = harness.beg_ab(cfg, out)
    harness.emit_plotdata(table, "brightness", out / "brightness.csv")
    for name, rows in table.items():
        fired = sum(r["beg_triggered"] for r in rows)
        print(f"{name}: final p85 max {rows[-1]['p85_max']:.4f}, BEG fired {fired} times")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args, out: Path) -> int:
    if args.config not in harness.PRESETS:
        raise ConfigError(f"sweep needs a preset name, one of {sorted(harness.PRESETS)}")
    preset = harness.PRESETS[args.config]
    results = harness.sweep_values(preset, cfg, out)
    rows = [[str(v), k, repr(r["dist_mode_mean"]), repr(r["p85_max"])] for (v, k), r in results.items()]
    _write_csv(out / "sweep.csv", [preset.swept, "seed", "dist_mode_mean", "p85_max"], rows)
    for row in rows:
        print("  ".join(map(str, row)))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sweep-dt": cmd_sweep_dt, "verify-bound": cmd_verify_bound,
            "ablate": cmd_ablate, "beg-ab": cmd_beg_ab, "sweep": cmd_sweep}


def cmd_render(args, extra: dict) -> int:
    cfg = RunConfig({"world.views": args.views, **extra})
    cfg = cfg.updated({"run.out_root": str(cfg.out_dir().parent)})
    scene = empty_scene(cfg.canvas) if args.scene == "empty-scene" else load_scene(args.scene)
    k = _pose_index(args.pose)
    views = make_views(args.views)
    if not 0 <= k < len(views):
        raise ConfigError(f"pose {k} out of range for {len(views)} views")
    latent = render(scene, views[k])
    image = (make_decoder(latent.shape[2], cfg["decoder.seed"], cfg["decoder.upsample"]).decode(latent)
             if args.decoded else latent_preview(latent))
    path = Path(args.out) if args.out else Path(cfg["run.out_root"]) / f"pose{k}.ppm"
    _write_lock(cfg, path.parent)
    write_ppm(path, image)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.name is None:
        for p in harness.PRESETS.values():
            print(f"{p.name:>13s}  {p.description}")
        return EXIT_OK
    if args.name not in harness.PRESETS:
        raise ConfigError(f"unknown preset {args.name!r}")
    sys.stdout.write(harness.PRESETS[args.name].config_text())
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = parser.parse_known_args(argv)
        extra = _overrides(rest)
        if args.command == "presets":
            if extra:
                raise UsageError("presets takes no overrides")
            return cmd_presets(args)
        if args.command == "render":
            return cmd_render(args, extra)
        cfg = load_config(args.config, extra)
        out = cfg.out_dir()
        _write_lock(cfg, out)
        return COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        sys.stderr.write((exc.usage or parser.format_usage()) + f"gcslab: error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"gcslab: config error: {exc}\n")
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, OSError, ValueError) as exc:
        sys.stderr.write(f"gcslab: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

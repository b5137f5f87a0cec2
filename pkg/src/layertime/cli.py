"""Command-line front end: ``layertime run | sweep | curve``.

Exit status is 0 on success, 2 for invalid configuration or arguments and
1 for failures while running.
"""

from __future__ import annotations

import argparse
import sys

from .artifacts import emit_curve
from .config import RunConfig
from .errors import ConfigError, LayertimeError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layertime", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one network")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--mode", choices=("nested", "non-nested"))
    r.add_argument("--seconds-per-unit", type=float,
                   help="skip calibration and use this work unit")

    s = sub.add_parser("sweep", help="grid of overrides x seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", required=True, help="comma-separated, e.g. 0,1,2")
    s.add_argument("--grid", nargs="+", required=True, metavar="KEY=V1,V2",
                   help="list-valued keys separate elements with ':'")
    s.add_argument("--out")
    s.add_argument("--mode", choices=("nested", "non-nested"))
    s.add_argument("--jobs", type=int, default=1, help="concurrent runs (default 1)")
    s.add_argument("--seconds-per-unit", type=float)

    c = sub.add_parser("curve", help="project log.csv to curve.csv")
    c.add_argument("--log", required=True)
    c.add_argument("--out")
    return p


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.mode is not None:
        overrides["run.mode"] = args.mode
    if args.seconds_per_unit is not None:
        overrides["run.seconds_per_unit"] = args.seconds_per_unit
    return cfg.with_overrides(overrides) if overrides else cfg


def _cmd_run(args) -> int:
    from .runner import execute_run

    cfg = _load(args)
    summary = execute_run(cfg)
    f = summary["final"]
    print(f"{cfg.mode} seed {summary['seed']}: val_acc {f['val_acc']:.4f} "
          f"work_units {f['work_units']:.1f} -> {cfg['run.out']}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .runner import run_sweep

    cfg = _load(args)
    try:
        seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: not a list of integers: {args.seeds!r}", field="seeds")
    if not seeds:
        raise ConfigError("--seeds: empty", field="seeds")
    try:
        res = run_sweep(cfg, seeds, args.grid, jobs=args.jobs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"--grid: {exc}", field="grid")
    for row in res["summary"]:
        print(f"{row['config_id']:>6}  runs {row['runs']:>3}  mean {row['mean']:.4f}  "
              f"median {row['median']:.4f}  stddev {row['stddev']:.4f}  {row['overrides']}")
    failed = [r for r in res["raw"] if r["status"] != "ok"]
    for r in failed:
        print(f"run cfg{r['config_id']} seed {r['seed']} failed: {r['error']}", file=sys.stderr)
    return EXIT_RUNTIME if len(failed) == len(res["raw"]) else EXIT_OK


def _cmd_curve(args) -> int:
    path = emit_curve(args.log, args.out)
    print(path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "curve": _cmd_curve}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"layertime: config error [{exc.field}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LayertimeError, ValueError, OSError, FloatingPointError) as exc:
        print(f"layertime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Run and sweep orchestration on top of the training drivers."""

from __future__ import annotations

import csv
import io
import itertools
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .artifacts import atomic_write, write_controls, write_curve, write_json, write_log
from .config import RunConfig, parse_value
from .data import generate_peaks, load_csv, split
from .nested import nested_train
from .optimizer import calibrate_work_unit, train_non_nested


@dataclass
class RunData:
    train: object
    val: object
    provenance: dict


def load_data(cfg: RunConfig) -> RunData:
    seed = cfg.data_seed
    if cfg["data.source"] == "peaks":
        ds = generate_peaks(cfg["data.samples"], seed)
    else:
        ds = load_csv(cfg["data.path"], cfg["data.n_f"], cfg["data.n_c"],
                      cfg["data.label_mode"], cfg["data.normalize"])
    tr, va = split(ds, cfg["data.train"], cfg["data.val"], seed)
    return RunData(tr, va, dict(ds.provenance, split_seed=seed))


def calibrate(cfg: RunConfig, data: RunData | None = None) -> float:
    """Seconds per work unit for ``cfg``'s finest grid on this machine."""
    data = data or load_data(cfg)
    shape = cfg.shape(data.train.n_f, data.train.n_c)
    return calibrate_work_unit(shape, cfg.hyper(), data.train.batch(), cfg.optimizer(),
                               cfg["run.probe_iters"], cfg["run.seed"], cfg.mgrit(),
                               cfg["non_nested.d"], cfg["run.probe_warmup"])


def execute_run(cfg: RunConfig, out_dir=None, seconds_per_unit: float | None = None) -> dict:
    """Train according to ``cfg`` and write all artifacts to ``out_dir``.

    Returns the run summary (also written as ``summary.json``).
    """
    out = Path(out_dir if out_dir is not None else cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    spu = seconds_per_unit or cfg["run.seconds_per_unit"]
    calibrated = spu is None
    if calibrated:
        spu = calibrate(cfg, data)
    shape = cfg.shape(data.train.n_f, data.train.n_c)
    trace = cfg["mgrit.trace"]
    if trace is not None and not Path(trace).is_absolute():
        trace = str(out / trace)
    settings = cfg.mgrit(trace)
    train_b = data.train.batch()
    val_b = data.val.batch() if len(data.val) else None
    t0 = time.perf_counter()
    if cfg.mode == "nested":
        theta, log = nested_train(cfg.schedule(), shape, cfg.hyper(), train_b, val_b,
                                  cfg.optimizer(), cfg["run.seed"], settings, spu)
    else:
        theta, log = train_non_nested(shape, cfg["non_nested.m"], cfg.hyper(), train_b, val_b,
                                      cfg.optimizer(), cfg["run.seed"], settings,
                                      cfg["non_nested.d"], spu)
    elapsed = time.perf_counter() - t0

    final = log.final()
    summary = {
        "version": __version__,
        "config": cfg.to_json(),
        "seed": cfg["run.seed"],
        "mode": cfg.mode,
        "seconds_per_unit": spu,
        "calibrated": calibrated,
        "data": data.provenance,
        "events": log.events,
        "records": len(log.records),
        "final": {
            "val_acc": final.val_acc if final else None,
            "train_acc": final.train_acc if final else None,
            "objective": final.objective if final else None,
            "work_units": final.work_units if final else 0.0,
            "stalls": sum(r.stalled for r in log.records),
        },
        "elapsed_seconds": elapsed,
    }
    write_log(log.records, out / "log.csv")
    if log.records:
        write_curve(log.records, out / "curve.csv")
    write_controls(theta, out / "controls.bin")
    write_json(summary, out / "summary.json")
    return summary


# -- sweeps ------------------------------------------------------------------------

RAW_FIELDS = ("config_id", "overrides", "seed", "status", "val_acc", "work_units", "error")
SUMMARY_FIELDS = ("config_id", "overrides", "runs", "missing", "mean", "median", "max", "min",
                  "stddev")


def parse_grid(items) -> list:
    """``["key=v1,v2", ...]`` to the list of override dicts (Cartesian product).

    Values are parsed with the key's type, so typos fail before any run.
    List-valued keys separate their elements with ``:`` inside a grid.
    """
    axes = []
    for item in items:
        if "=" not in item:
            raise ValueError(f"grid entry {item!r} is not key=v1,v2,...")
        key, vals = item.split("=", 1)
        key = key.strip()
        choices = [parse_value(key, v) for v in vals.split(",") if v.strip()]
        if not choices:
            raise ValueError(f"grid entry {item!r} has no values")
        axes.append([(key, c) for c in choices])
    if not axes:
        raise ValueError("grid is empty")
    return [dict(combo) for combo in itertools.product(*axes)]


def describe(overrides: dict) -> str:
    def fmt(v):
        return ":".join(map(str, v)) if isinstance(v, tuple) else str(v)
    return ";".join(f"{k}={fmt(v)}" for k, v in overrides.items())


def stats(values) -> dict:
    """Mean, median, max, min and sample standard deviation."""
    vals = list(values)
    if not vals:
        return {k: float("nan") for k in ("mean", "median", "max", "min", "stddev")}
    return {
        "mean": statistics.fmean(vals),
        "median": statistics.median(vals),
        "max": max(vals),
        "min": min(vals),
        "stddev": statistics.stdev(vals) if len(vals) > 1 else float("nan"),
    }


def _sweep_job(args):
    cfg_dict, out_dir, spu = args
    cfg = RunConfig.from_mapping(cfg_dict)
    try:
        summary = execute_run(cfg, out_dir, spu)
        return "ok", summary["final"]["val_acc"], summary["final"]["work_units"], ""
    except Exception as exc:  # recorded per run, the sweep carries on
        return "failed", None, None, f"{type(exc).__name__}: {exc}"


def run_sweep(cfg: RunConfig, seeds, grid_items, out_dir=None, jobs: int = 1,
              seconds_per_unit: float | None = None) -> dict:
    """Run every grid point for every seed; write ``sweep_raw.csv`` and
    ``sweep_summary.csv``. Returns ``{"raw": rows, "summary": rows}``."""
    out = Path(out_dir if out_dir is not None else cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    combos = parse_grid(grid_items)
    configs = [cfg.with_overrides(o) for o in combos]
    spu = seconds_per_unit or cfg["run.seconds_per_unit"] or calibrate(configs[0])

    tasks, keys = [], []
    for i, (o, c) in enumerate(zip(combos, configs)):
        for seed in seeds:
            run_cfg = c.with_overrides({"run.seed": seed})
            tasks.append((run_cfg.to_json(), str(out / f"cfg{i}_seed{seed}"), spu))
            keys.append((i, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, tasks))
    else:
        results = [_sweep_job(t) for t in tasks]

    raw = []
    for (i, seed), (status, acc, work, err) in zip(keys, results):
        raw.append({"config_id": i, "overrides": describe(combos[i]), "seed": seed,
                    "status": status, "val_acc": acc, "work_units": work, "error": err})
    summary = []
    for i, o in enumerate(combos):
        accs = [r["val_acc"] for r in raw if r["config_id"] == i and r["status"] == "ok"]
        summary.append({"config_id": i, "overrides": describe(o), "runs": len(accs),
                        "missing": len(seeds) - len(accs), **stats(accs)})
    ok = [r["val_acc"] for r in raw if r["status"] == "ok"]
    summary.append({"config_id": "pooled", "overrides": "", "runs": len(ok),
                    "missing": len(raw) - len(ok), **stats(ok)})
    atomic_write(out / "sweep_raw.csv", _table(RAW_FIELDS, raw))
    atomic_write(out / "sweep_summary.csv", _table(SUMMARY_FIELDS, summary))
    write_json({"seconds_per_unit": spu, "seeds": list(seeds), "grid": list(grid_items),
                "base_config": cfg.to_json()}, out / "sweep.json")
    return {"raw": raw, "summary": summary, "seconds_per_unit": spu}


def _table(fields, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(fields)
    for r in rows:
        wr.writerow(["" if r[f] is None else (repr(r[f]) if isinstance(r[f], float) else r[f])
                     for f in fields])
    return buf.getvalue()

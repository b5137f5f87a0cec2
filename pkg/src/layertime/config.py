"""Run configuration: a flat ``key = value`` file with dotted section prefixes.

Example::

    # peaks, nested
    network.width = 8
    network.layers = 64
    nested.levels = 3
    nested.m = 120, 75, 45

Blank lines and ``#`` comments are ignored. Unknown keys are errors. Every
key has a default, so a config file only lists what it changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .mgrit import MgritSettings
from .nested import INTERPOLATIONS, NestedSchedule
from .network import Hyperparameters, NetworkShape
from .optimizer import OptimizerConfig


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(kind):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none", "default"):
            return None
        return kind(text)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _int(text):
    if isinstance(text, bool):
        raise ValueError("not an integer")
    if isinstance(text, int):
        return text
    return int(str(text).strip())


def _float(text):
    if isinstance(text, bool):
        raise ValueError("not a number")
    return float(text)


def _str(text):
    return str(text).strip()


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(_int(x) for x in text)
    parts = [p for p in str(text).replace(":", ",").split(",") if p.strip()]
    return tuple(_int(p) for p in parts)


# key -> (parser, default)
SCHEMA = {
    "network.width": (_int, 8),
    "network.layers": (_int, 64),
    "network.T": (_float, 5.0),
    "hyper.w_i": (_float, 0.0),
    "hyper.gamma_tik": (_float, 1e-5),
    "hyper.gamma_ddt": (_float, 0.0),
    "hyper.epsilon_relu": (_float, 0.1),
    "hyper.opening_scale": (_opt(_float), None),
    "nested.levels": (_int, 3),
    "nested.m": (_int_list, (120, 75, 45)),
    "nested.interpolation": (_str, "constant"),
    "nested.d_post_refine": (_int, 10),
    "nested.post_refine_span": (_int, 3),
    "nested.d_steady": (_int, 2),
    "nested.tolerance_mode": (_bool, False),
    "non_nested.m": (_int, 188),
    "non_nested.d": (_int, 2),
    "optimizer.step_init": (_float, 1.0),
    "optimizer.armijo_c": (_float, 1e-4),
    "optimizer.shrink": (_float, 0.5),
    "optimizer.max_backtracks": (_int, 20),
    "optimizer.rel_tol_mgrit": (_opt(_float), None),
    "optimizer.serial_line_search": (_bool, False),
    "optimizer.direction": (_str, "steepest"),
    "optimizer.lbfgs_memory": (_int, 10),
    "mgrit.c": (_int, 2),
    "mgrit.max_levels": (_int, 10),
    "mgrit.coarsest_max": (_int, 4),
    "mgrit.workers": (_opt(_int), None),
    "mgrit.trace": (_opt(_str), None),
    "data.source": (_str, "peaks"),
    "data.path": (_opt(_str), None),
    "data.n_f": (_opt(_int), None),
    "data.n_c": (_opt(_int), None),
    "data.label_mode": (_str, "index"),
    "data.normalize": (_bool, False),
    "data.samples": (_int, 2000),
    "data.train": (_int, 1000),
    "data.val": (_int, 1000),
    "data.seed": (_opt(_int), None),
    "run.seed": (_int, 0),
    "run.mode": (_str, "nested"),
    "run.out": (_str, "out"),
    "run.seconds_per_unit": (_opt(_float), None),
    "run.probe_iters": (_int, 30),
    "run.probe_warmup": (_int, 10),
}

MODES = ("nested", "non-nested")


def parse_value(key: str, text):
    """Convert ``text`` to the type of ``key``; raises ConfigError naming the key."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}", field=key)
    parser = SCHEMA[key][0]
    try:
        return parser(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})", field=key) from None


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", field=None)
        key, value = (p.strip() for p in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", field=key)
        values[key] = parse_value(key, value)
    return values


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully populated run configuration."""

    values: tuple

    # -- construction -----------------------------------------------------------

    @classmethod
    def from_mapping(cls, mapping: dict, base_dir=None) -> "RunConfig":
        vals = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in mapping.items():
            vals[k] = parse_value(k, v)
        if base_dir is not None and vals["data.path"] is not None:
            p = Path(vals["data.path"])
            if not p.is_absolute():
                vals["data.path"] = str(Path(base_dir) / p)
        cfg = cls(tuple(sorted(vals.items())))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found", field="config")
        return cls.from_mapping(parse_text(path.read_text(encoding="utf-8"), str(path)),
                                base_dir=path.parent)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = self.as_dict()
        merged.update(overrides)
        return RunConfig.from_mapping(merged)

    # -- access ---------------------------------------------------------------

    def __getitem__(self, key):
        return dict(self.values)[key]

    def as_dict(self) -> dict:
        return dict(self.values)

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values}

    def dump(self) -> str:
        def fmt(v):
            if v is None:
                return "none"
            if isinstance(v, tuple):
                return ", ".join(str(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.values)

    # -- derived objects ----------------------------------------------------------

    @property
    def mode(self) -> str:
        return self["run.mode"]

    @property
    def data_seed(self) -> int:
        s = self["data.seed"]
        return self["run.seed"] if s is None else s

    def shape(self, n_f: int, n_c: int) -> NetworkShape:
        return NetworkShape(n_f, self["network.width"], n_c, self["network.layers"],
                            self["network.T"])

    def hyper(self) -> Hyperparameters:
        return Hyperparameters(self["hyper.w_i"], self["hyper.gamma_tik"],
                               self["hyper.gamma_ddt"], self["hyper.epsilon_relu"],
                               self["hyper.opening_scale"])

    def schedule(self) -> NestedSchedule:
        L = self["nested.levels"]
        return NestedSchedule(
            L, self["network.layers"] // 2 ** (L - 1), self["nested.m"],
            self["nested.interpolation"], self["nested.d_post_refine"],
            self["nested.post_refine_span"], self["nested.d_steady"],
            self["nested.tolerance_mode"])

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            self["optimizer.step_init"], self["optimizer.armijo_c"], self["optimizer.shrink"],
            self["optimizer.max_backtracks"], self["optimizer.rel_tol_mgrit"],
            "nested" if self.mode == "nested" else "non_nested",
            self["optimizer.serial_line_search"], self["optimizer.direction"],
            self["optimizer.lbfgs_memory"])

    def mgrit(self, trace_path=None) -> MgritSettings:
        return MgritSettings(self["mgrit.c"], self["mgrit.max_levels"],
                             self["mgrit.coarsest_max"], self["mgrit.workers"],
                             trace_path)

    # -- validation -------------------------------------------------------------

    def validate(self):
        v = self.as_dict()

        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}", field=key)

        for key in ("network.width", "network.layers", "nested.levels", "non_nested.d",
                    "optimizer.lbfgs_memory", "data.train"):
            need(v[key] >= 1, key, "must be >= 1")
        need(v["non_nested.m"] >= 0, "non_nested.m", "must be >= 0")
        need(v["data.val"] >= 0, "data.val", "must be >= 0")
        need(math.isfinite(v["network.T"]) and v["network.T"] > 0, "network.T", "must be > 0")
        for key in ("hyper.w_i", "hyper.gamma_tik", "hyper.gamma_ddt"):
            need(math.isfinite(v[key]) and v[key] >= 0, key, "must be finite and >= 0")
        need(v["hyper.epsilon_relu"] > 0, "hyper.epsilon_relu", "must be > 0")
        need(v["hyper.opening_scale"] is None or v["hyper.opening_scale"] >= 0,
             "hyper.opening_scale", "must be >= 0")

        L = v["nested.levels"]
        N = v["network.layers"]
        need(len(v["nested.m"]) == L, "nested.m",
             f"needs {L} iteration counts (one per level, coarsest first)")
        need(all(x >= 1 for x in v["nested.m"]), "nested.m", "counts must be >= 1")
        need(N % 2 ** (L - 1) == 0, "network.layers",
             f"{N} layers cannot be halved {L - 1} times")
        need(v["nested.interpolation"] in INTERPOLATIONS, "nested.interpolation",
             f"must be one of {', '.join(INTERPOLATIONS)}")
        need(v["nested.d_steady"] >= 1, "nested.d_steady", "must be >= 1")
        need(v["nested.d_post_refine"] >= v["nested.d_steady"], "nested.d_post_refine",
             "must be >= nested.d_steady")
        need(v["nested.post_refine_span"] >= 0, "nested.post_refine_span", "must be >= 0")

        need(v["optimizer.step_init"] > 0, "optimizer.step_init", "must be > 0")
        need(0 < v["optimizer.armijo_c"] < 1, "optimizer.armijo_c", "must be in (0, 1)")
        need(0 < v["optimizer.shrink"] < 1, "optimizer.shrink", "must be in (0, 1)")
        need(v["optimizer.max_backtracks"] >= 0, "optimizer.max_backtracks", "must be >= 0")
        tol = v["optimizer.rel_tol_mgrit"]
        need(tol is None or tol > 0, "optimizer.rel_tol_mgrit", "must be > 0")
        need(v["optimizer.direction"] in ("steepest", "lbfgs"), "optimizer.direction",
             "must be steepest or lbfgs")

        c = v["mgrit.c"]
        need(c >= 2, "mgrit.c", "must be >= 2")
        need(v["mgrit.max_levels"] >= 1, "mgrit.max_levels", "must be >= 1")
        need(v["mgrit.coarsest_max"] >= 1, "mgrit.coarsest_max", "must be >= 1")
        need(v["mgrit.workers"] is None or v["mgrit.workers"] >= 1, "mgrit.workers",
             "must be >= 1")
        levels = [N // 2 ** k for k in range(L)] if v["run.mode"] == "nested" else [N]
        for n in levels:
            k, count = n, 1
            while k > v["mgrit.coarsest_max"] and count < v["mgrit.max_levels"]:
                need(k % c == 0, "mgrit.coarsest_max",
                     f"a {n}-layer grid is not divisible by c = {c} down to at most "
                     f"{v['mgrit.coarsest_max']} layers")
                k //= c
                count += 1

        need(v["run.mode"] in MODES, "run.mode", "must be nested or non-nested")
        need(v["run.probe_iters"] >= 3, "run.probe_iters", "must be >= 3")
        need(v["run.probe_warmup"] >= 0, "run.probe_warmup", "must be >= 0")
        spu = v["run.seconds_per_unit"]
        need(spu is None or spu > 0, "run.seconds_per_unit", "must be > 0")

        src = v["data.source"]
        need(src in ("peaks", "csv"), "data.source", "must be peaks or csv")
        if src == "peaks":
            need(v["data.samples"] >= 1, "data.samples", "must be >= 1")
            need(v["data.train"] + v["data.val"] <= v["data.samples"], "data.train",
                 "data.train + data.val exceeds data.samples")
        else:
            need(v["data.path"] is not None, "data.path", "required when data.source = csv")
            need(Path(v["data.path"]).is_file(), "data.path",
                 f"file {v['data.path']} not found")
            need(v["data.n_f"] is not None and v["data.n_f"] >= 1, "data.n_f",
                 "required (>= 1) when data.source = csv")
            need(v["data.n_c"] is not None and v["data.n_c"] >= 2, "data.n_c",
                 "required (>= 2) when data.source = csv")
            need(v["data.label_mode"] in ("index", "onehot"), "data.label_mode",
                 "must be index or onehot")

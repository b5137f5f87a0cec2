"""On-disk artifacts: training logs, curves, run summaries and control files.

Every writer goes through :func:`atomic_write`, so a file is either absent
or complete.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .network import ControlTrajectory, NetworkShape
from .optimizer import RECORD_FIELDS

CONTROLS_MAGIC = b"LTCT"
CONTROLS_VERSION = 1
_HEADER = struct.Struct("<4sIQQQQdd")

CURVE_FIELDS = ("work_units", "objective", "train_acc", "val_acc", "level")

_INT_FIELDS = {"iteration", "level", "d_used", "backtracks", "fwd_iters", "bwd_iters"}
_BOOL_FIELDS = {"stalled"}


def atomic_write(path, data, mode="w"):
    """Write ``data`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode + ("b" if isinstance(data, bytes) else ""),
                       **({} if isinstance(data, bytes) else {"encoding": "utf-8",
                                                               "newline": ""})) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([_fmt(v) for v in row])
    return buf.getvalue()


# -- training log ------------------------------------------------------------------

def write_log(records, path):
    atomic_write(path, _csv_text(RECORD_FIELDS, (r.row() for r in records)))


def read_log(path):
    """Parse a ``log.csv`` into a list of dicts with typed values.

    Raises
    ------
    DataFormatError
        With the 1-based line number of the first malformed line.
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty log", row=1)
    header = rows[0]
    missing = [f for f in CURVE_FIELDS if f not in header]
    if missing:
        raise DataFormatError(f"{path}: line 1: header lacks {', '.join(missing)}", row=1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(
                f"{path}: line {lineno}: {len(row)} fields, expected {len(header)}", row=lineno)
        rec = {}
        for name, text in zip(header, row):
            try:
                if name in _INT_FIELDS:
                    rec[name] = int(text)
                elif name in _BOOL_FIELDS:
                    rec[name] = bool(int(text))
                else:
                    rec[name] = float(text)
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: bad value {text!r} for {name}", row=lineno)
        out.append(rec)
    if not out:
        raise DataFormatError(f"{path}: log has no records", row=2)
    return out


# -- curves ----------------------------------------------------------------------

def curve_rows(records):
    """Project log records to plot-ready curve rows.

    ``records`` are dicts (as from :func:`read_log`) or ``TrainingRecord``
    objects. Work units must be strictly increasing.
    """
    rows = []
    prev = -math.inf
    for k, r in enumerate(records):
        get = r.get if isinstance(r, dict) else lambda f, r=r: getattr(r, f)
        row = [get(f) for f in CURVE_FIELDS]
        if not row[0] > prev:
            raise DataFormatError(f"record {k}: work_units not strictly increasing", row=k + 2)
        prev = row[0]
        row[-1] = int(row[-1])
        rows.append(row)
    if not rows:
        raise DataFormatError("empty log")
    return rows


def write_curve(records, path):
    atomic_write(path, _csv_text(CURVE_FIELDS, curve_rows(records)))


def emit_curve(log_path, out_path=None) -> Path:
    """Read ``log_path`` and write ``curve.csv`` next to it (or to ``out_path``)."""
    log_path = Path(log_path)
    out_path = Path(out_path) if out_path else log_path.with_name("curve.csv")
    write_curve(read_log(log_path), out_path)
    return out_path


# -- summaries --------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(obj, path):
    atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- controls ----------------------------------------------------------------------

def controls_bytes(theta: ControlTrajectory) -> bytes:
    """Little-endian binary image of ``theta``.

    Layout: magic ``LTCT``, u32 version, u64 ``n_f, w, n_c, N``, f64 ``T, h``,
    then the blocks in flatten order as f64.
    """
    sh = theta.shape
    head = _HEADER.pack(CONTROLS_MAGIC, CONTROLS_VERSION, sh.n_f, sh.w, sh.n_c, sh.N,
                        float(sh.T), float(sh.h))
    return head + theta.flatten().astype("<f8").tobytes()


def controls_from_bytes(buf: bytes) -> ControlTrajectory:
    if len(buf) < _HEADER.size:
        raise DataFormatError("controls file truncated")
    magic, version, n_f, w, n_c, N, T, _h = _HEADER.unpack_from(buf)
    if magic != CONTROLS_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}")
    if version != CONTROLS_VERSION:
        raise DataFormatError(f"unsupported controls version {version}")
    shape = NetworkShape(n_f, w, n_c, N, T)
    vec = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(float)
    size = w * n_f + N * (w * w + w) + n_c * w + n_c
    if vec.size != size:
        raise DataFormatError(f"controls payload has {vec.size} values, expected {size}")
    return ControlTrajectory.unflatten(vec, shape)


def write_controls(theta: ControlTrajectory, path):
    atomic_write(path, controls_bytes(theta))


def read_controls(path) -> ControlTrajectory:
    return controls_from_bytes(Path(path).read_bytes())

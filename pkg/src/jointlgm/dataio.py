"""Stable file formats: long-format CSVs for the data, JSON for results.

Longitudinal CSV: header id,time,y[,x1,x2,...].
Survival CSV:     header id,time,event[,z1,z2,...]  (event 1 = observed).

All writers go through a temporary file plus atomic rename so no output is
ever partially written; floats are serialized with 17 significant digits so
golden files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile

import numpy as np

from .errors import DataFormatError
from .model import JointData, LongRow, SurvRow

FLOAT_FMT = ".17g"


def format_float(x: float) -> str:
    return format(float(x), FLOAT_FMT)


def _json_fragments(obj, indent: int):
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            yield "{}"
            return
        yield "{\n"
        for i, (k, v) in enumerate(obj.items()):
            yield pad + "  " + json.dumps(str(k)) + ": "
            yield from _json_fragments(v, indent + 2)
            yield ",\n" if i < len(obj) - 1 else "\n"
        yield pad + "}"
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = list(obj)
        if not items:
            yield "[]"
            return
        yield "[\n"
        for i, v in enumerate(items):
            yield pad + "  "
            yield from _json_fragments(v, indent + 2)
            yield ",\n" if i < len(items) - 1 else "\n"
        yield pad + "]"
    elif isinstance(obj, bool) or obj is None:
        yield json.dumps(obj)
    elif isinstance(obj, (int, np.integer)):
        yield str(int(obj))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            yield json.dumps(None)
        else:
            yield format(x, FLOAT_FMT)
    else:
        yield json.dumps(str(obj))


def dumps_json(obj) -> str:
    return "".join(_json_fragments(obj, 0)) + "\n"


def atomic_write_text(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj):
    atomic_write_text(path, dumps_json(obj))


def read_json(path: str):
    with open(path) as f:
        return json.load(f)


def _parse_float(text: str, path: str, row_no: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(
            f"{path}: row {row_no}: column {col!r} is not a number: {text!r}") from None


def read_long_csv(path: str) -> list[LongRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "time", "y"]:
            raise DataFormatError(f"{path}: expected header id,time,y[,x1,...]")
        ncol = len(header)
        for row_no, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != ncol:
                raise DataFormatError(
                    f"{path}: row {row_no}: expected {ncol} fields, got {len(rec)}")
            t = _parse_float(rec[1], path, row_no, "time")
            y = _parse_float(rec[2], path, row_no, "y")
            x = tuple(_parse_float(v, path, row_no, header[3 + j])
                      for j, v in enumerate(rec[3:]))
            rows.append(LongRow(subject_id=rec[0].strip(), t=t, y=y, x=x))
    return rows


def read_surv_csv(path: str) -> list[SurvRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "time", "event"]:
            raise DataFormatError(f"{path}: expected header id,time,event[,z1,...]")
        ncol = len(header)
        for row_no, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != ncol:
                raise DataFormatError(
                    f"{path}: row {row_no}: expected {ncol} fields, got {len(rec)}")
            s = _parse_float(rec[1], path, row_no, "time")
            ev = rec[2].strip()
            if ev not in ("0", "1"):
                raise DataFormatError(
                    f"{path}: row {row_no}: event must be 0 or 1, got {ev!r}")
            z = tuple(_parse_float(v, path, row_no, header[3 + j])
                      for j, v in enumerate(rec[3:]))
            rows.append(SurvRow(subject_id=rec[0].strip(), s=s, c=int(ev), z=z))
    return rows


def write_long_csv(path: str, rows):
    lines = []
    p = len(rows[0].x) if rows else 0
    header = ["id", "time", "y"] + [f"x{j + 1}" for j in range(p)]
    lines.append(",".join(header))
    for r in rows:
        lines.append(",".join([str(r.subject_id), format_float(r.t), format_float(r.y)]
                              + [format_float(v) for v in r.x]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_surv_csv(path: str, rows):
    lines = []
    p = len(rows[0].z) if rows else 0
    header = ["id", "time", "event"] + [f"z{j + 1}" for j in range(p)]
    lines.append(",".join(header))
    for r in rows:
        lines.append(",".join([str(r.subject_id), format_float(r.s), str(int(r.c))]
                              + [format_float(v) for v in r.z]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_curve_csv(path: str, curves):
    """time,value,kind,subject_id rows for one or more survival curves."""
    lines = ["time,value,kind,subject_id"]
    for c in curves:
        sid = "" if c.subject_id is None else str(c.subject_id)
        for t, v in zip(c.times, c.survival):
            lines.append(f"{format_float(t)},{format_float(v)},{c.kind},{sid}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def joint_data_from_csvs(long_path: str | None, surv_path: str | None) -> JointData:
    long_rows = read_long_csv(long_path) if long_path else []
    surv_rows = read_surv_csv(surv_path) if surv_path else []
    return JointData(tuple(long_rows), tuple(surv_rows))

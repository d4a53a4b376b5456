"""Deterministic JSON/CSV writers (doubles printed in shortest round-trip form)."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .gaussian import GaussianMoment, GaussianNat, moment_to_nat


def fmt(x) -> str:
    """Shortest text that round-trips the float exactly; empty for None/NaN."""
    if x is None:
        return ""
    x = float(x)
    if not math.isfinite(x):
        return ""
    return repr(x)


def _json(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) or "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        return _json(obj.tolist(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_json(str(k), indent, level + 1)}: {_json(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_json(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _json(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    return _json(obj, indent, 0) + "\n"


def write_json(path: Path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def gaussian_json(q: GaussianMoment) -> dict:
    nat = moment_to_nat(q)
    return {"moment": {"mu": q.mu, "sigma": q.sigma}, "natural": {"r": nat.r, "B": nat.B}}


def nat_json(q: GaussianNat) -> dict:
    return {"r": q.r, "B": q.B}


def moment_columns(prefix: str, d: int) -> list[str]:
    mu = [f"{prefix}mu_{i}" for i in range(d)]
    sep = "" if d <= 10 else "_"
    sig = [f"{prefix}sigma_{i}{sep}{j}" for i in range(d) for j in range(d)]
    return mu + sig


def moment_values(q: GaussianMoment | None, d: int) -> list[str]:
    if q is None:
        return [""] * (d + d * d)
    return [fmt(v) for v in q.mu] + [fmt(v) for v in q.sigma.ravel()]


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else ("" if v is None else v) for v in row])


def trace_header(d: int) -> list[str]:
    return ["sweep", "step", "method", "site"] + moment_columns("", d) + [
        "e_grad_norm", "damping", "kl_reverse", "wall_ms"]


def trace_rows(trace) -> list[list]:
    rows = []
    for rec in trace.records:
        rows.append([rec.sweep, rec.step, rec.method, "" if rec.site is None else rec.site]
                    + moment_values(rec.global_q, trace.d)
                    + [fmt(rec.e_grad_norm), fmt(rec.damping), fmt(rec.kl_reverse), fmt(rec.wall_ms)])
    return rows


def write_trace(path: Path, trace) -> None:
    write_csv(path, trace_header(trace.d), trace_rows(trace))

"""Readers and writers for the on-disk formats.

* slice matrices: CSV with header ``slice_0,...,slice_{k-1}`` and cells in {-1,0,1}
* loss vectors and weights: single-column CSV (``loss`` / ``weight``)
* feature matrices: numeric CSV with a header row
* dependency graph: JSON list of ``[i, j]`` pairs
* correction matrices: JSON ``{"source": [{"minus": [p, q], "zero": [p, q], "plus": [p, q]}, ...], "target": [...]}``
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .slice_core import CorrectionMatrix, CorrectionTable, DependencyGraph, InputError, SliceMatrix

_COLS = {"minus": 0, "zero": 1, "plus": 2}


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path} is empty")
    return rows[0], rows[1:]


def read_slices(path) -> SliceMatrix:
    header, rows = _read_rows(path)
    expected = [f"slice_{i}" for i in range(len(header))]
    if [h.strip() for h in header] != expected:
        raise InputError(f"{path}: header must be {','.join(expected)}")
    try:
        vals = np.array([[int(c) for c in r] for r in rows if r], dtype=np.int64)
    except ValueError as exc:
        raise InputError(f"{path}: slice cells must be integers ({exc})") from exc
    if vals.size == 0:
        raise InputError(f"{path}: no rows")
    if vals.ndim != 2 or vals.shape[1] != len(header):
        raise InputError(f"{path}: ragged rows")
    if np.any(np.abs(vals) > 127):
        raise InputError(f"{path}: slice values out of range")
    return SliceMatrix(vals)


def write_slices(path, slices: SliceMatrix):
    v = slices.values
    header = ",".join(f"slice_{i}" for i in range(v.shape[1]))
    body = "\n".join(",".join(map(str, row)) for row in v.tolist())
    Path(path).write_text(header + "\n" + body + "\n", encoding="utf-8")


def read_column(path, name: str) -> np.ndarray:
    header, rows = _read_rows(path)
    if [h.strip() for h in header] != [name]:
        raise InputError(f"{path}: expected a single column named {name!r}")
    try:
        vals = np.array([float(r[0]) for r in rows if r], dtype=float)
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(vals)):
        raise InputError(f"{path}: non-finite values")
    return vals


def write_column(path, name: str, values):
    body = "\n".join(repr(float(v)) for v in np.asarray(values, dtype=float))
    Path(path).write_text(f"{name}\n{body}\n", encoding="utf-8")


def read_loss(path) -> np.ndarray:
    return read_column(path, "loss")


def write_loss(path, loss):
    write_column(path, "loss", loss)


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        x = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise InputError(f"{path}: non-finite values")
    return x


def write_features(path, x, fmt="%.10g"):
    x = np.asarray(x, dtype=float)
    header = ",".join(f"x_{i}" for i in range(x.shape[1]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        np.savetxt(fh, x, delimiter=",", fmt=fmt, header=header, comments="")


def read_edges(path) -> DependencyGraph:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list) or not all(
        isinstance(e, list) and len(e) == 2 and all(isinstance(i, int) for i in e) for e in data
    ):
        raise InputError(f"{path}: edges must be a JSON list of [i, j] integer pairs")
    return DependencyGraph(tuple(tuple(e) for e in data))


def write_edges(path, graph: DependencyGraph):
    Path(path).write_text(json.dumps([list(e) for e in graph.edges]) + "\n", encoding="utf-8")


def _side_from_json(side, name) -> CorrectionTable:
    if not isinstance(side, list) or not side:
        raise InputError(f"correction {name!r} must be a non-empty list of per-slice tables")
    k = len(side)
    tables = np.full((k, 2, 3), 0.5)
    has = np.zeros(k, dtype=bool)
    for i, entry in enumerate(side):
        if not isinstance(entry, dict):
            raise InputError(f"correction {name}[{i}] must be an object")
        for key in ("minus", "plus"):
            if key not in entry:
                raise InputError(f"correction {name}[{i}] missing field {key!r}")
        unknown = set(entry) - set(_COLS)
        if unknown:
            raise InputError(f"correction {name}[{i}] has unknown fields {sorted(unknown)}")
        for key, col in _COLS.items():
            if key not in entry:
                continue
            pair = entry[key]
            if not (isinstance(pair, list) and len(pair) == 2 and all(
                isinstance(v, (int, float)) and math.isfinite(v) for v in pair
            )):
                raise InputError(f"correction {name}[{i}].{key} must be two finite numbers")
            tables[i, :, col] = pair
        has[i] = "zero" in entry
    return CorrectionTable(tables, has)


def read_correction(path) -> CorrectionMatrix:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: correction file must be a JSON object")
    for key in ("source", "target"):
        if key not in data:
            raise InputError(f"{path}: missing field {key!r}")
    return CorrectionMatrix(_side_from_json(data["source"], "source"),
                            _side_from_json(data["target"], "target"))


def correction_to_json(corr: CorrectionMatrix) -> dict:
    def side(t: CorrectionTable):
        out = []
        for i in range(t.k):
            entry = {"minus": t.tables[i, :, 0].tolist(), "plus": t.tables[i, :, 2].tolist()}
            if t.has_abstain[i]:
                entry["zero"] = t.tables[i, :, 1].tolist()
            out.append(entry)
        return out

    return {"source": side(corr.source), "target": side(corr.target)}


def write_correction(path, corr: CorrectionMatrix):
    dump_json(path, correction_to_json(corr))


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")

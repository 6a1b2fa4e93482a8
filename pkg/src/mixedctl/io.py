"""CSV writers/readers with a fixed numeric format (17 significant digits, LF endings)."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import GridFunction, Trajectory


def fmt(value) -> str:
    if isinstance(value, (str, bool)):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def read_values(path, expected: int) -> np.ndarray:
    """The ``value`` column of a CSV file, checked against the expected node count."""
    header, rows = read_csv(path)
    if "value" not in header:
        raise ValueError(f"{path} has no 'value' column")
    col = header.index("value")
    values = np.array([float(r[col]) for r in rows])
    if values.size != expected:
        raise ValueError(f"{path} holds {values.size} values, expected {expected}")
    return values


def write_grid_function(gf: GridFunction, path) -> Path:
    idx = gf.geom.index(gf.tag)
    labels = gf.geom.tags()
    return write_csv(path, ["node_index", "x", "tag", "value"],
                     ([int(i), gf.geom.x[i], labels[i], v] for i, v in zip(idx, gf.values)))


def write_trajectory(traj: Trajectory, path, layout: str = "long") -> list[Path]:
    """``long``: one file with ``(t, x, value)`` rows; ``frames``: one grid-function CSV per frame."""
    path = Path(path)
    times, x = traj.time_grid.times, traj.geom.x
    if layout == "long":
        rows = ((t, xi, v) for t, frame in zip(times, traj.frames) for xi, v in zip(x, frame))
        return [write_csv(path, ["t", "x", "value"], rows)]
    if layout != "frames":
        raise ValueError(f"unknown trajectory layout {layout!r}")
    path.mkdir(parents=True, exist_ok=True)
    width = len(str(traj.time_grid.n_steps))
    return [write_grid_function(traj.frame(m), path / f"frame_{m:0{width}d}.csv")
            for m in range(traj.frames.shape[0])]


def sha256(path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if np.isfinite(obj) else str(obj)
    return obj


def write_json_atomic(path, payload) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path

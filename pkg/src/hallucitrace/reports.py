"""Report files: CSV tables stamped with the config hash, and JSON sidecars.

Every CSV starts with ``# config_sha256: <hex>``, then a header row.
Floats are written with ``repr`` so they parse back bit-for-bit.  Nothing
time-dependent is ever written.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from .model import KINDS
from .tracing import POSITION_GROUPS

HASH_PREFIX = "# config_sha256: "


class ReportError(ValueError):
    pass


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_csv(path, header, rows, config_hash):
    buf = io.StringIO()
    buf.write(HASH_PREFIX + config_hash + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    _atomic_write(path, buf.getvalue())


def read_csv(path):
    """``(config_hash, header, rows)`` with every cell as a string."""
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    if not lines or not lines[0].startswith(HASH_PREFIX):
        raise ReportError(f"{path}: missing config hash line")
    h = lines[0][len(HASH_PREFIX):].strip()
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise ReportError(f"{path}: missing header row") from None
    return h, header, [row for row in reader]


def parse_float(s):
    return float(s)


def write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# -- AIE heatmaps ---------------------------------------------------------------------

def heatmap_export(grid, directory, config_hash, prefix="aie"):
    """One CSV per component kind (rows: position groups, columns: layers) plus counts JSON.

    Returns the list of written paths.
    """
    directory = Path(directory)
    n_layers = grid.values.shape[1]
    header = ["group"] + [f"layer_{layer}" for layer in range(1, n_layers + 1)]
    paths = []
    for k, kind in enumerate(grid.kinds):
        rows = [[g] + list(grid.values[k, :, j]) for j, g in enumerate(grid.groups)]
        p = directory / f"{prefix}_{kind}.csv"
        write_csv(p, header, rows, config_hash)
        paths.append(p)
    p = directory / f"{prefix}_counts.json"
    write_json(p, {"config_sha256": config_hash, "groups": list(grid.groups),
                   "counts": [int(c) for c in grid.counts],
                   "empty_groups": [g for g, c in zip(grid.groups, grid.counts) if c == 0]})
    paths.append(p)
    return paths


def heatmap_import(directory, prefix="aie", kinds=KINDS):
    """Parse :func:`heatmap_export` output back into an :class:`AieGrid`."""
    from .tracing import AieGrid
    directory = Path(directory)
    mats = []
    groups = None
    for kind in kinds:
        _, header, rows = read_csv(directory / f"{prefix}_{kind}.csv")
        groups = tuple(r[0] for r in rows)
        mats.append([[float(c) for c in r[1:]] for r in rows])
    values = np.transpose(np.array(mats), (0, 2, 1))
    meta = read_json(directory / f"{prefix}_counts.json")
    return AieGrid(values, np.array(meta["counts"]), tuple(kinds), groups or POSITION_GROUPS)

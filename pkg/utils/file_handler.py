"""Result writers: diagnostics CSV, field snapshots, catalogs, probe tables and reports."""
import csv
import json
import logging
import os

import numpy as np

from config.settings import CSV_FLOAT_FORMAT, FORMAT_VERSION, SNAPSHOT_HEADER

logger = logging.getLogger(__name__)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return CSV_FLOAT_FORMAT % float(value)
    return str(value)


def _header_lines(manifest_json=None, extra=None):
    lines = [f"# format_version {FORMAT_VERSION}"]
    for key, value in (extra or {}).items():
        lines.append(f"# {key} {value}")
    if manifest_json:
        lines.append("# manifest " + json.dumps(json.loads(manifest_json), separators=(",", ":")))
    return lines


def write_table(path, columns, rows, manifest_json=None, extra=None):
    """CSV with '#' comment header lines, a column row and %.17g floats."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in _header_lines(manifest_json, extra):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    logger.info(f"Wrote {path}")
    return path


def read_table(path):
    """(header comments, columns, rows as lists of strings)."""
    comments, body = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            (comments if line.startswith("#") else body).append(line)
    reader = csv.reader(body)
    columns = next(reader)
    return comments, columns, [row for row in reader]


def write_diagnostics(path, records, manifest_json=None, extra=None):
    from advanced.diagnostics import RECORD_COLUMNS

    return write_table(path, RECORD_COLUMNS, (r.as_row() for r in records), manifest_json, extra)


def write_probes(path, rows, manifest_json=None):
    return write_table(path, ("t", "x", "y", "z", "phi", "phi_t"), rows, manifest_json)


def write_difference(path, result, manifest_json=None):
    extra = {}
    if result.fit is not None:
        extra = {"decay_rate": CSV_FLOAT_FORMAT % result.fit.rate,
                 "r_squared": CSV_FLOAT_FORMAT % result.fit.r_squared}
    extra["v_monotone_fraction"] = CSV_FLOAT_FORMAT % result.monotone_fraction
    a0, a1 = result.probe.sandwich_constants()
    extra["sandwich_a0"] = CSV_FLOAT_FORMAT % a0
    extra["sandwich_a1"] = CSV_FLOAT_FORMAT % a1
    rows = zip(result.times, result.energies, result.lyapunov)
    return write_table(path, ("t", "E_u", "V"), rows, manifest_json, extra)


def write_snapshot(path, field, t, manifest_json=None):
    """Comment header, the line "nx ny x0 y0 Lx Ly t", then the nodal values row-major (i over x)."""
    g = field.grid
    with open(path, "w", encoding="utf-8") as fh:
        for line in _header_lines(manifest_json):
            fh.write(line + "\n")
        fh.write(f"# {SNAPSHOT_HEADER}\n")
        fh.write(" ".join(_fmt(v) for v in (g.nx, g.ny, g.x0, g.y0, g.Lx, g.Ly, t)) + "\n")
        np.savetxt(fh, field.values, fmt=CSV_FLOAT_FORMAT)
    return path


def read_snapshot(path):
    from core.grid import PlateGrid, ScalarField

    with open(path, "r", encoding="utf-8") as fh:
        line = fh.readline()
        while line.startswith("#"):
            line = fh.readline()
        nx, ny, x0, y0, Lx, Ly, t = line.split()
        values = np.loadtxt(fh, ndmin=2)
    grid = PlateGrid(int(nx), int(ny), float(Lx), float(Ly), float(x0), float(y0))
    return ScalarField(grid, values), float(t)


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=float)
    logger.info(f"Wrote {path}")
    return path


def write_catalog(path, eq_set, manifest_json=None):
    payload = eq_set.to_dict()
    if manifest_json:
        payload["manifest"] = json.loads(manifest_json)
    return write_json(path, payload)


"""File formats: long-form CSV panels and JSON artifacts, written atomically.

Schemas are documented in FORMATS.md; floats are serialized with shortest
round-trip repr so identical inputs produce byte-identical files.
"""

import csv
import io
import json
import os
import tempfile

import numpy as np


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def atomic_write_text(path, text):
    """Write via a temp file + rename so partial files never appear."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows_to_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_long_csv(path, header, panel):
    """Panel (T, N) as rows of (time, node, value...)."""
    panel = np.asarray(panel)
    rows = ((t, n, panel[t, n]) for t in range(panel.shape[0])
            for n in range(panel.shape[1]))
    atomic_write_text(path, _rows_to_csv(header, rows))


def read_long_csv(path):
    """Long-form (time, node, value) CSV back into a dense (T, N) array."""
    times, nodes, values = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            times.append(int(row[0]))
            nodes.append(int(row[1]))
            values.append(float(row[2]))
    t_max = max(times) + 1
    n_max = max(nodes) + 1
    panel = np.zeros((t_max, n_max))
    panel[times, nodes] = values
    return panel


def write_panel_csv(path, panel):
    write_long_csv(path, ("time", "node", "value"), panel)


def write_mask_csv(path, masks):
    write_long_csv(path, ("time", "node", "is_anomaly"), masks.astype(int))


def read_mask_csv(path):
    return read_long_csv(path).astype(bool)


def write_pvalues_csv(path, panel):
    write_long_csv(path, ("time", "node", "p"), panel)


read_pvalues_csv = read_long_csv


def write_rejections_csv(path, masks):
    write_long_csv(path, ("time", "node", "rejected"), masks.astype(int))


def write_intervals_csv(path, lower, upper):
    lower = np.asarray(lower)
    upper = np.asarray(upper)
    rows = ((t, n, lower[t, n], upper[t, n]) for t in range(lower.shape[0])
            for n in range(lower.shape[1]))
    atomic_write_text(path, _rows_to_csv(("time", "node", "lower", "upper"), rows))


def write_pit_csv(path, pit):
    rows = ((i, v) for i, v in enumerate(np.asarray(pit)))
    atomic_write_text(path, _rows_to_csv(("index", "pit"), rows))


def write_reliability_csv(path, levels, coverages):
    rows = zip(np.asarray(levels), np.asarray(coverages))
    atomic_write_text(path, _rows_to_csv(("nominal_level", "empirical_coverage"), rows))


def write_aggregates_csv(path, mu, sigma, p, flags):
    """Per-step intersection aggregates: (time, intersection, mu, sigma, p, flag)."""
    mu = np.asarray(mu)
    rows = ((t, j, mu[t, j], sigma[t, j], p[t, j], int(flags[t, j]))
            for t in range(mu.shape[0]) for j in range(mu.shape[1]))
    atomic_write_text(path, _rows_to_csv(
        ("time", "intersection", "mu", "sigma", "p", "flag"), rows))


def write_trajectory_csv(path, trajectory):
    """Trajectory rows: t, per-intersection state, action, reward, d_C, L."""
    n_int = trajectory.queues.shape[1]
    header = (["t"]
              + [f"queue_{i}" for i in range(n_int)]
              + [f"wait_{i}" for i in range(n_int)]
              + [f"throughput_{i}" for i in range(n_int)]
              + [f"action_{i}" for i in range(n_int)]
              + ["reward", "d_c", "lyapunov"])
    rows = []
    for t in range(trajectory.queues.shape[0]):
        rows.append([t, *trajectory.queues[t], *trajectory.waits[t],
                     *trajectory.throughput[t], *trajectory.actions[t],
                     trajectory.rewards[t], trajectory.violations[t],
                     trajectory.lyapunov[t]])
    atomic_write_text(path, _rows_to_csv(header, rows))


def write_json(path, payload):
    """Serialize a dict (or an object exposing to_json) deterministically."""
    if hasattr(payload, "to_json"):
        text = payload.to_json()
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    atomic_write_text(path, text + "\n" if not text.endswith("\n") else text)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)

"""Sweep execution and output writing.

Cells run in a process pool (or inline for one worker). Results come back
in cell order, so the written files do not depend on the worker count.
"""
from concurrent.futures import ProcessPoolExecutor
import csv
import json
import math
from pathlib import Path
import platform
import time

import numpy as np
import scipy

from .. import __version__
from .config import ExperimentConfig
from .experiments import REGISTRY

__all__ = ["cell_seed", "run_experiment", "write_csv", "read_csv"]


def cell_seed(master, cell_index, target_index=0):
    """Stable 63-bit seed derived from ``(master, cell, target)``."""
    seq = np.random.SeedSequence([int(master), int(cell_index), int(target_index)])
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _task(args):
    name, data, cell, seed, shared = args
    return REGISTRY[name].run(data, cell, seed, shared)


def _format(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, columns, rows, header):
    """CSV with ``# key: value`` metadata lines before the column header."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row.get(c, "")) for c in columns])
    return path


def read_csv(path):
    """``(header, rows)`` of a file written by :func:`write_csv`; values stay strings."""
    header, lines = {}, []
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(":")
                header[key.strip()] = value.strip()
            else:
                lines.append(line)
    return header, list(csv.DictReader(lines))


def run_experiment(cfg, out_dir=None, threads=None, write=True):
    """Run every cell of ``cfg`` and write CSV/JSON outputs.

    Returns ``(table, manifest)`` where ``table`` is the list of row dicts
    of the main CSV.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.from_dict(cfg)
    exp = REGISTRY[cfg.experiment]
    threads = cfg.threads if threads is None else threads
    data = cfg.to_dict()
    started = time.time()
    cells = exp.cells(cfg)
    shared = exp.shared(data) if exp.shared else None
    tasks = []
    for i, cell in enumerate(cells):
        seed = cell_seed(cfg.seed, cell.get("cell", i), cell.get("target", 0))
        tasks.append((cfg.experiment, data, cell, seed, shared))
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_task, tasks))
    else:
        rows = [_task(t) for t in tasks]
    if exp.finish:
        table, extra = exp.finish(cfg, rows)
    else:
        table, extra = rows, {}
    digest = cfg.hash()
    header = {"experiment": cfg.experiment, "config_hash": digest,
              "version": __version__, "seed": cfg.seed}
    manifest = {
        "experiment": cfg.experiment,
        "config_hash": digest,
        "version": __version__,
        "seed": cfg.seed,
        "n_cells": len(cells),
        "threads": threads,
        "status": _status_counts(rows),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_time": time.time() - started,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "files": {},
    }
    if shared is not None:
        manifest["shared"] = {k: v for k, v in shared.items() if np.isscalar(v)}
    if write:
        out = Path(out_dir or cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        stem = cfg.experiment.replace("-", "_")
        files = {"data": write_csv(out / f"{stem}.csv", exp.columns, table, header)}
        for name, (cols, extra_rows) in extra.items():
            files[name] = write_csv(out / f"{stem}_{name}.csv", cols, extra_rows, header)
        cfg_path = out / f"{stem}_config.json"
        cfg_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        files["config"] = cfg_path
        manifest["files"] = {k: str(v.name) for k, v in files.items()}
        (out / f"{stem}_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return table, manifest


def _status_counts(rows):
    counts = {}
    for row in rows:
        status = str(row.get("status", "ok"))
        key = "ok" if status == "ok" else status.split(":")[0]
        counts[key] = counts.get(key, 0) + 1
    return counts

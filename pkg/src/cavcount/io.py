"""On-disk formats: trace CSV, event JSON-lines, spectra CSV and JSON reports.

Writers are deterministic (sorted keys, fixed float formatting), so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cavity import SpectrumPoint
from .dynamics import Trace, TruthEvent

TRACE_HEADER = ("t_start_us", "photons", "t_est")
SPECTRUM_HEADER = ("n_atoms", "x", "transmission", "sigma")


def plain(obj):
    """JSON-safe copy: numpy scalars/arrays unwrapped, enums by value, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, np.generic):
        return plain(obj.item())
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj, indent: int | None = None) -> str:
    return json.dumps(plain(obj), sort_keys=True, indent=indent, allow_nan=False)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj, indent=2) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_trace(path, trace: Trace, meta: dict | None = None) -> Path:
    """Persist photon counts; ground truth columns are simulation-only and dropped."""
    path = Path(path)
    info = dict(trace.meta if meta is None else meta)
    info.setdefault("bin_us", int(trace.bin_us))
    info.setdefault("photons_per_bin_empty", float(trace.photons_per_bin_empty))
    with path.open("w", newline="") as fh:
        fh.write("# " + dumps(info) + "\n")
        fh.write(",".join(TRACE_HEADER) + "\n")
        for t, p, e in zip(trace.t_start_us, trace.photons, trace.t_est):
            fh.write(f"{int(t)},{int(p)},{float(e)!r}\n")
    return path


def read_trace(path) -> Trace:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing '#' metadata line")
        meta = json.loads(first[1:])
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != TRACE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(TRACE_HEADER)}, got {header}")
        rows = [r for r in reader if r]
    t = np.array([int(r[0]) for r in rows], dtype=np.int64)
    photons = np.array([int(r[1]) for r in rows], dtype=np.int64)
    cavity = meta.get("cavity", {})
    ppb = meta.get("photons_per_bin_empty", cavity.get("photons_per_bin_empty"))
    bin_us = meta.get("bin_us", cavity.get("bin_us"))
    if ppb is None:
        est = np.array([float(r[2]) for r in rows])
        ok = est > 0
        if not ok.any():
            raise ValueError(f"{path}: cannot infer photons_per_bin_empty")
        ppb = float(np.median(photons[ok] / est[ok]))
    if bin_us is None:
        if len(t) < 2:
            raise ValueError(f"{path}: cannot infer bin_us")
        bin_us = int(np.min(np.diff(t)))
    return Trace(t, photons, float(ppb), int(bin_us), meta=meta)


def write_jsonl(path, items: Iterable) -> Path:
    """One JSON object per line; items may be dicts or have ``as_dict``."""
    path = Path(path)
    with path.open("w") as fh:
        for item in items:
            fh.write(dumps(item.as_dict() if hasattr(item, "as_dict") else item) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_truth_events(path) -> list[TruthEvent]:
    return [TruthEvent.from_dict(d) for d in read_jsonl(path)]


def write_spectra(path, datasets: Sequence[tuple[int, Sequence[SpectrumPoint]]]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(SPECTRUM_HEADER) + "\n")
        for n, points in datasets:
            for p in points:
                fh.write(f"{int(n)},{float(p.x)!r},{float(p.transmission)!r},{float(p.sigma)!r}\n")
    return path


def read_spectra(paths) -> list[tuple[int, list[SpectrumPoint]]]:
    """Points from one or more spectra CSVs, grouped by atom number."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    groups: dict[int, list[SpectrumPoint]] = defaultdict(list)
    for path in paths:
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != SPECTRUM_HEADER:
                raise ValueError(f"{path}: expected header {','.join(SPECTRUM_HEADER)}")
            for row in reader:
                n = int(row["n_atoms"])
                groups[n].append(SpectrumPoint(float(row["x"]), float(row["transmission"]), n,
                                               float(row["sigma"])))
    return sorted(groups.items())


def write_histogram(path, edges: Sequence[float], counts: Sequence[int], name: str = "count") -> Path:
    """Histogram as ``t_low,t_high,<name>`` rows."""
    path = Path(path)
    edges = list(edges)
    counts = list(counts)
    if len(edges) != len(counts) + 1:
        raise ValueError("need len(edges) == len(counts) + 1")
    with path.open("w", newline="") as fh:
        fh.write(f"t_low,t_high,{name}\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{round(float(lo), 10)!r},{round(float(hi), 10)!r},{int(c)}\n")
    return path

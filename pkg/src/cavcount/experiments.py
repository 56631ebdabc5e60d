"""Experiment runners. Each writes its data files and a manifest into the output directory."""

from __future__ import annotations

import hashlib
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__, io
from .analysis import (LevelCalibration, analyze_trace, calibrate_levels, collision_statistics,
                       detect_events, transmission_histogram)
from .cavity import SpectrumPoint, fit_cooperativity, spectrum
from .config import ExperimentConfig
from .control import campaign, trial_seed
from .dynamics import Segment, simulate, simulate_multi_trap

MANIFEST = "manifest.json"


def versions() -> dict:
    return {"cavcount": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _detect_kwargs(opts: dict) -> dict:
    return {k: opts[k] for k in ("noise_floor", "window", "z", "collision_atoms", "plateau_ms")}


def _classification_accuracy(traces, cal: LevelCalibration) -> float:
    hits = total = 0
    for tr in traces:
        if tr.truth_f4 is None or len(tr) == 0:
            continue
        hits += int(np.sum(cal.classify(tr.t_est) == np.minimum(tr.truth_f4, cal.n_atoms[-1])))
        total += len(tr)
    return hits / total if total else float("nan")


def run_spectrum(ec: ExperimentConfig, out: Path, trials: int) -> tuple[list[Path], dict]:
    """Noisy transmission spectra for 0..n_max atoms and the shared-eta fit."""
    r = ec.run_options()
    cfg = ec.cavity_config()
    rng = np.random.default_rng(ec.seed)
    xs = np.linspace(r["x_min"], r["x_max"], int(r["n_points"]))
    files, datasets = [], []
    for n in range(int(r["n_max"]) + 1):
        clean = spectrum(n, cfg, xs)
        noise = rng.normal(0.0, r["sigma"], len(clean))
        pts = [SpectrumPoint(p.x, p.transmission + e, n, r["sigma"]) for p, e in zip(clean, noise)]
        datasets.append((n, pts))
        files.append(io.write_spectra(out / f"spectrum_n{n}.csv", [(n, pts)]))
    fit = fit_cooperativity(datasets, cfg, free_kappa=bool(r["free_kappa"]))
    summary = fit.as_dict()
    files.append(io.write_json(out / "fit.json", summary))
    return files, summary


def _jump_traces(ec: ExperimentConfig, trials: int):
    """Continuously probed tweezer arrays with slow hyperfine jumps."""
    r = ec.run_options()
    cfg = ec.cavity_config()
    params = ec.sim_params()
    schedule = [Segment(r["duration_ms"], r["repump_per_ms"], r["depump_per_ms"])]
    out = []
    for i in range(trials):
        s = trial_seed(ec.seed, i)
        loads = np.random.default_rng(s).random(int(r["n_traps"])) < r["p_load"]
        trace, truth = simulate_multi_trap(loads.astype(int).tolist(), cfg, params,
                                           r["duration_ms"], s, schedule=schedule)
        out.append((trace, truth))
    return out


def run_histogram(ec: ExperimentConfig, out: Path, trials: int) -> tuple[list[Path], dict]:
    """Transmission histogram over many traces and the level calibration drawn from it."""
    cfg = ec.cavity_config()
    a = ec.analysis_options()
    traces = [tr for tr, _ in _jump_traces(ec, trials)]
    edges, counts = transmission_histogram(traces, a["hist_width"])
    cal = calibrate_levels(traces, cfg, int(a["n_max"]), a["hist_width"])
    summary = {
        "calibration": cal.as_dict(),
        "model_levels": [float(cfg.level(n)) for n in range(int(a["n_max"]) + 1)],
        "classification_accuracy": _classification_accuracy(traces, cal),
        "n_bins": int(sum(len(t) for t in traces)),
    }
    files = [io.write_histogram(out / "histogram.csv", edges, counts),
             io.write_json(out / "levels.json", summary)]
    return files, summary


def run_traces(ec: ExperimentConfig, out: Path, trials: int) -> tuple[list[Path], dict]:
    """Individual traces with truth logs, detected events and per-bin classification."""
    cfg = ec.cavity_config()
    a = ec.analysis_options()
    cal = LevelCalibration.from_model(cfg, int(a["n_max"]))
    files = []
    per_trace = []
    for i, (trace, truth) in enumerate(_jump_traces(ec, trials)):
        events = detect_events(trace, cal, **_detect_kwargs(a))
        files.append(io.write_trace(out / f"trace_{i:04d}.csv", trace))
        files.append(io.write_jsonl(out / f"truth_{i:04d}.jsonl", truth))
        files.append(io.write_jsonl(out / f"events_{i:04d}.jsonl", events))
        per_trace.append({"trace": i, "n_events": len(events), "n_truth": len(truth),
                          "accuracy": _classification_accuracy([trace], cal)})
    summary = {"traces": per_trace,
               "classification_accuracy": float(np.mean([p["accuracy"] for p in per_trace]))}
    files.append(io.write_json(out / "summary.json", summary))
    return files, summary


def collision_loading(seed: int, index: int, lam: float, lo: int, hi: int) -> int:
    """Poisson atom number conditioned on ``n >= lo`` and capped at ``hi``."""
    rng = np.random.default_rng(trial_seed(seed, index))
    while True:
        k = int(rng.poisson(lam))
        if k >= lo:
            return min(k, hi)


def run_collisions(ec: ExperimentConfig, out: Path, trials: int) -> tuple[list[Path], dict]:
    """Continuously probed single tweezer; collision statistics from detected events."""
    r = ec.run_options()
    cfg = ec.cavity_config()
    params = ec.sim_params()
    a = ec.analysis_options()
    cal = LevelCalibration.from_model(cfg, 4)
    kwargs = _detect_kwargs(a)
    analyses, events, truth_rows, files = [], [], [], []
    for i in range(trials):
        n = collision_loading(ec.seed, i, r["load_lambda"], int(r["min_atoms"]), int(r["max_atoms"]))
        trace, truth = simulate(n, cfg, params, r["duration_ms"], trial_seed(ec.seed, i))
        ta = analyze_trace(trace, cal, truth=truth, **kwargs)
        analyses.append(ta)
        events += [{"trial": i, **e.as_dict()} for e in ta.events]
        truth_rows += [{"trial": i, **e.as_dict()} for e in truth]
        if r["write_traces"]:
            files.append(io.write_trace(out / f"trace_{i:04d}.csv", trace))
    report = collision_statistics(analyses, noise_floor=a["noise_floor"],
                                  min_trials=min(100, trials))
    summary = report.as_dict()
    summary["underpowered"] = trials < 100
    files += [
        io.write_jsonl(out / "events.jsonl", events),
        io.write_jsonl(out / "truth.jsonl", truth_rows),
        io.write_json(out / "report.json", summary),
        io.write_histogram(out / "collision_times.csv", report.time_edges_us, report.time_counts),
        io.write_histogram(out / "recovery.csv", report.recovery_edges, report.recovery_counts),
    ]
    return files, summary


def run_adaptive(ec: ExperimentConfig, out: Path, trials: int) -> tuple[list[Path], dict]:
    """Closed-loop single-atom preparation campaign."""
    r = ec.run_options()
    ctrl = ec.controller_config()
    cfg = ctrl.cavity(ec.cavity_config())
    params = ctrl.sim_params(ec.sim_params())
    report, results = campaign(trials, cfg, params, ctrl, ec.seed, workers=int(r["workers"]),
                               keep_traces=bool(r["keep_traces"]))
    summary = report.as_dict()
    actions = [{"shot": i, **entry.as_dict()} for i, res in enumerate(results) for entry in res.actions]
    files = [
        io.write_jsonl(out / "trials.jsonl", report.records),
        io.write_jsonl(out / "actions.jsonl", actions),
        io.write_json(out / "report.json", summary),
        io.write_histogram(out / "initial_hist.csv", report.hist_edges, report.initial_hist),
        io.write_histogram(out / "final_hist.csv", report.hist_edges, report.final_hist),
    ]
    if r["keep_traces"]:
        for i, res in enumerate(results):
            files.append(io.write_trace(out / f"trace_{i:04d}.csv", res.trace))
    return files, summary


RUNNERS = {
    "Spectrum": run_spectrum,
    "Histogram": run_histogram,
    "Traces": run_traces,
    "Collisions": run_collisions,
    "Adaptive": run_adaptive,
}


def _clear_previous(out: Path) -> None:
    """Drop files listed by an earlier manifest so no stale artifacts remain."""
    old = out / MANIFEST
    if not old.exists():
        return
    try:
        listed = io.read_json(old).get("files", {})
    except ValueError:
        listed = {}
    for name in listed:
        p = out / name
        if p.is_file() and p.parent == out:
            p.unlink()
    old.unlink()


def run_experiment(ec: ExperimentConfig, quick: bool = False,
                   output_dir: str | Path | None = None) -> dict:
    """Run ``ec`` and write its artifacts plus ``manifest.json``; returns the manifest."""
    out = Path(output_dir if output_dir is not None else ec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _clear_previous(out)
    trials = max(1, ec.trials // 10) if quick else ec.trials
    files, summary = RUNNERS[ec.experiment](ec, out, trials)
    config = ec.as_dict()
    manifest = {
        "experiment": ec.experiment,
        "seed": ec.seed,
        "trials": trials,
        "quick": quick,
        "config": config,
        "config_sha256": hashlib.sha256(io.dumps(config).encode()).hexdigest(),
        "seed_scheme": "trial i uses SeedSequence([seed, i]).generate_state(2, uint64)[0] >> 1",
        "versions": versions(),
        "files": {p.name: io.sha256(p) for p in sorted(files, key=lambda p: p.name)},
        "summary": _headline(ec.experiment, summary),
    }
    io.write_json(out / MANIFEST, manifest)
    return manifest


def _headline(experiment: str, s: dict) -> dict:
    keys = {
        "Spectrum": ("eta", "eta_stderr"),
        "Histogram": ("classification_accuracy", "n_bins"),
        "Traces": ("classification_accuracy",),
        "Collisions": ("n_collisions", "fast_fraction", "slow_tau_fit_ms",
                       "collisions_per_trial_mean", "recovery_fraction"),
        "Adaptive": ("success_rate", "success_stderr", "mean_time_to_success_ms", "failure_modes"),
    }[experiment]
    return {k: s[k] for k in keys}

"""``cavcount`` command line. Exit codes: 0 ok, 1 bad config or arguments, 2 runtime failure."""

from __future__ import annotations

import glob
import sys
from pathlib import Path

import click

from . import io
from .analysis import (InsufficientTrials, LevelCalibration, analyze_trace, calibrate_levels,
                       collision_statistics, transmission_histogram)
from .cavity import CavityConfig, fit_cooperativity
from .config import ConfigError, from_mapping, load_config, read_raw, shipped_configs, validate_config
from .control import MODES
from .dynamics import SimParams, simulate_multi_trap
from .experiments import run_experiment


def _sections(config: str | None) -> tuple[CavityConfig, dict]:
    if config is None:
        return CavityConfig(), {}
    ec = load_config(config)
    return ec.cavity_config(), ec.sim


def _echo_json(obj) -> None:
    click.echo(io.dumps(obj, indent=2))


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Cavity-based atom counting: simulate, analyze, fit and run experiments."""


@cli.command()
@click.option("-n", "--n-initial", type=int, default=2, show_default=True,
              help="Atoms in a single trap.")
@click.option("--traps", default=None, help="Comma-separated atoms per trap, e.g. 1,0,1,1.")
@click.option("--duration-ms", type=float, default=50.0, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML config supplying cavity and sim sections.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
def simulate(n_initial, traps, duration_ms, seed, config, out_dir):
    """Simulate one continuously probed trace; writes trace.csv and truth.jsonl."""
    cfg, sim = _sections(config)
    params = SimParams(**sim)
    try:
        n_per_trap = [int(v) for v in traps.split(",")] if traps else [n_initial]
    except ValueError as exc:
        raise ConfigError([f"--traps must be comma-separated integers ({exc})"]) from exc
    problems = params.problems(cfg)
    if problems:
        raise ConfigError(problems)
    trace, truth = simulate_multi_trap(n_per_trap, cfg, params, duration_ms, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_trace(out / "trace.csv", trace)
    io.write_jsonl(out / "truth.jsonl", truth)
    click.echo(f"wrote {len(trace)} bins and {len(truth)} truth events to {out}")


def _trace_cavity(trace, fallback: CavityConfig) -> CavityConfig:
    cav = trace.meta.get("cavity")
    return CavityConfig(**cav) if cav else fallback


@cli.command()
@click.argument("patterns", nargs=-1, required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--noise-floor", type=float, default=0.07, show_default=True)
@click.option("--window", type=int, default=5, show_default=True, help="Change-detection window in bins.")
@click.option("--z", type=float, default=4.0, show_default=True, help="Shot-noise significance.")
@click.option("--collision-atoms", type=float, default=1.25, show_default=True)
@click.option("--calibrate/--model-levels", default=False,
              help="Take levels from the traces' histogram instead of the model.")
@click.option("--n-max", type=int, default=3, show_default=True)
@click.option("--emit-hist", is_flag=True, help="Also write histogram CSVs.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Cavity section to use when trace metadata lacks one.")
def analyze(patterns, out_dir, noise_floor, window, z, collision_atoms, calibrate, n_max,
            emit_hist, config):
    """Detect events in trace CSVs (glob patterns); writes events.jsonl and report.json."""
    paths = sorted({p for pat in patterns for p in glob.glob(pat)})
    if not paths:
        raise ConfigError([f"no trace files match {' '.join(patterns)}"])
    fallback, _ = _sections(config)
    traces = [io.read_trace(p) for p in paths]
    cfg = _trace_cavity(traces[0], fallback)
    cal = calibrate_levels(traces, cfg, n_max) if calibrate else LevelCalibration.from_model(cfg, n_max)
    kwargs = dict(noise_floor=noise_floor, window=window, z=z, collision_atoms=collision_atoms)
    rows, analyses = [], []
    for path, trace in zip(paths, traces):
        ta = analyze_trace(trace, cal, **kwargs)
        analyses.append(ta)
        rows += [{"file": Path(path).name, **e.as_dict()} for e in ta.events]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_jsonl(out / "events.jsonl", rows)
    report = {"n_files": len(paths), "n_events": len(rows), "calibration": cal.as_dict()}
    try:
        stats = collision_statistics(analyses, noise_floor=noise_floor, min_trials=1)
        report["collisions"] = stats.as_dict()
    except InsufficientTrials:
        stats = None
    io.write_json(out / "report.json", report)
    if emit_hist:
        edges, counts = transmission_histogram(traces)
        io.write_histogram(out / "transmission_hist.csv", edges, counts)
        if stats is not None:
            io.write_histogram(out / "collision_times.csv", stats.time_edges_us, stats.time_counts)
            io.write_histogram(out / "recovery.csv", stats.recovery_edges, stats.recovery_counts)
    click.echo(f"{len(rows)} events from {len(paths)} file(s) -> {out}")


@cli.command()
@click.argument("spectra", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--delta-ca-hz", type=float, default=None, help="Cavity-atom detuning (Hz).")
@click.option("--free-kappa", is_flag=True, help="Fit the cavity linewidth too.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default="fit.json", show_default=True)
def fit(spectra, delta_ca_hz, free_kappa, config, out):
    """Fit a shared cooperativity to spectra CSVs (n_atoms,x,transmission,sigma)."""
    cfg, _ = _sections(config)
    if delta_ca_hz is not None:
        cfg = CavityConfig(**{**cfg.__dict__, "delta_ca_hz": delta_ca_hz})
    result = fit_cooperativity(io.read_spectra(spectra), cfg, free_kappa=free_kappa)
    io.write_json(out, result.as_dict())
    click.echo(f"eta = {result.eta:.4f} +/- {result.eta_stderr:.4f} ({result.iterations} iterations)")


@cli.command()
@click.option("--mode", type=click.Choice(MODES), default="multi-trap", show_default=True)
@click.option("--trials", type=int, default=None, help="Accepted trials (default 275 / 228).")
@click.option("--p-eject", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--max-iter", type=int, default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
def adapt(mode, trials, p_eject, seed, max_iter, workers, out_dir):
    """Adaptive loading campaign; writes trial records, report and histograms."""
    raw = read_raw(shipped_configs()["adaptive_" + mode.split("-")[0]])
    overrides = {"p_eject": p_eject, "max_iterations": max_iter}
    raw["controller"].update({k: v for k, v in overrides.items() if v is not None})
    if trials is not None:
        raw["trials"] = trials
    if seed is not None:
        raw["seed"] = seed
    raw["run"] = {"workers": workers}
    ec = from_mapping(raw)
    manifest = run_experiment(ec, output_dir=out_dir)
    _echo_json(manifest["summary"])


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--quick", is_flag=True, help="Divide the trial count by 10.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
def run(config, quick, out_dir):
    """Run the experiment described by CONFIG and write a manifest."""
    ec = load_config(config)
    manifest = run_experiment(ec, quick=quick, output_dir=out_dir)
    _echo_json(manifest["summary"])


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
def validate(config):
    """Report every problem in CONFIG; exit 1 if there are any."""
    problems = validate_config(config)
    for p in problems:
        click.echo(p)
    if problems:
        sys.exit(1)
    click.echo("ok")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="cavcount", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 2
    except click.UsageError as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        for d in exc.diagnostics:
            click.echo(f"config error: {d}", err=True)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - any remaining failure is a runtime error
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

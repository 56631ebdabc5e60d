"""End-to-end acceptance checks, one test per criterion, each at its stated tolerance."""

import time

import numpy as np
from scipy.signal import find_peaks

from cavcount import io
from cavcount.cavity import CavityConfig, SpectrumPoint, fit_cooperativity, spectrum, transmission
from cavcount.cli import main
from cavcount.config import from_mapping, load_config, read_raw, shipped_configs
from cavcount.control import ControllerConfig, campaign, single_atom_window
from cavcount.dynamics import SimParams
from cavcount.experiments import run_experiment

# the closed form written out independently of the package
ORACLE_LEVELS_107 = (1.0, 0.778200, 0.478355)


def oracle(n, x, y, eta):
    return 1.0 / ((1 + n * eta / (1 + y**2)) ** 2 + (x - n * eta * y / (1 + y**2)) ** 2)


def config(name, **top):
    raw = read_raw(shipped_configs()[name])
    raw.update(top)
    return raw


def test_1_oracle_equivalence(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n, x = rng.uniform(0, 4, 10_000), rng.uniform(-20, 20, 10_000)
    y, eta = rng.uniform(-60, 60, 10_000), rng.uniform(1, 50, 10_000)
    err = float(np.max(np.abs(transmission(n, x, y, eta) - oracle(n, x, y, eta))))
    elapsed = time.perf_counter() - start
    criterion(1, err < 1e-12 and elapsed < 1.0,
              f"max |dT| = {err:.2e} over 10^4 points (< 1e-12), {elapsed:.2f} s (< 1 s)")


def test_2_fit_recovery(criterion):
    start = time.perf_counter()
    cfg = CavityConfig(delta_ca_hz=-50e6)
    xs = np.linspace(-10, 10, 101)
    clean = [(n, spectrum(n, cfg, xs)) for n in range(4)]
    etas = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        data = [(n, [SpectrumPoint(p.x, p.transmission + rng.normal(0, 0.01), n, 0.01) for p in pts])
                for n, pts in clean]
        etas.append(fit_cooperativity(data, cfg).eta)
    hits = int(np.sum(np.abs(np.array(etas) - 21.0) <= 0.5))
    elapsed = time.perf_counter() - start
    criterion(2, hits >= 95 and elapsed < 10.0,
              f"{hits}/100 fits within 21.0 +/- 0.5 (>= 95), {elapsed:.1f} s (< 10 s)")


def test_3_levels_and_classification(tmp_path, criterion):
    start = time.perf_counter()
    # 20 traces x 500 bins = 10^4 bins at 1000 photons/bin, +107 MHz, delta = 0
    ec = from_mapping(config("histogram", trials=20))
    assert ec.cavity_config().photons_per_bin_empty == 1000.0
    manifest = run_experiment(ec, output_dir=tmp_path)
    levels = io.read_json(tmp_path / "levels.json")
    n_bins = manifest["summary"]["n_bins"]
    accuracy = levels["classification_accuracy"]
    got = [lv["t_level"] for lv in levels["calibration"]["levels"][:3]]
    sigma = [np.sqrt(t / 1000.0) for t in ORACLE_LEVELS_107]
    dev = [abs(g - t) / s for g, t, s in zip(got, ORACLE_LEVELS_107, sigma)]
    elapsed = time.perf_counter() - start
    ok = n_bins == 10_000 and max(dev) < 1.0 and accuracy >= 0.99 and elapsed < 30.0
    criterion(3, ok, f"levels {np.round(got, 4).tolist()} within {max(dev):.2f} sigma_bin (< 1), "
                     f"accuracy {accuracy:.4f} on {n_bins} bins (>= 0.99), {elapsed:.1f} s (< 30 s)")


def test_4_collision_closed_loop(tmp_path, criterion):
    start = time.perf_counter()
    ec = load_config(shipped_configs()["collisions"], env={})
    assert ec.trials == 1000
    run_experiment(ec, output_dir=tmp_path)
    rep = io.read_json(tmp_path / "report.json")
    elapsed = time.perf_counter() - start

    cfg = ec.cavity_config()
    gap = cfg.level(ec.sim_params().heated_coupling) - cfg.level(1)
    edges = np.array(rep["recovery_edges"])
    counts = np.convolve(rep["recovery_counts"], np.ones(3) / 3, mode="same")
    centers = 0.5 * (edges[:-1] + edges[1:])
    peaks, _ = find_peaks(counts, prominence=3 * np.sqrt(counts.max() / 3))
    near = [float(centers[p]) for p in peaks if abs(centers[p] - gap) <= 0.05]

    checks = {
        "fast_fraction": (rep["fast_fraction"], abs(rep["fast_fraction"] - 0.20) <= 0.03, "0.20 +/- 0.03"),
        "slow_tau_ms": (rep["slow_tau_fit_ms"], abs(rep["slow_tau_fit_ms"] - 9.0) <= 1.8, "9 +/- 20%"),
        "collisions/trial": (rep["collisions_per_trial_mean"],
                             abs(rep["collisions_per_trial_mean"] - 1.8) <= 0.2, "1.8 +/- 0.2"),
        "recovery": (rep["recovery_fraction"], abs(rep["recovery_fraction"] - 0.50) <= 0.05,
                     "0.50 +/- 0.05"),
    }
    parts = [f"{k} {v:.3f} ({tol})" for k, (v, _, tol) in checks.items()]
    parts.append(f"one-atom peak {near[0] if near else None} vs gap {gap:.3f} (+/- 0.05)")
    parts.append(f"{elapsed:.1f} s (< 120 s)")
    ok = all(c[1] for c in checks.values()) and bool(near) and elapsed < 120.0
    criterion(4, ok, ", ".join(parts))


def _adaptive(raw, tmp_path, name):
    start = time.perf_counter()
    manifest = run_experiment(from_mapping(raw), output_dir=tmp_path / name)
    return manifest["summary"], time.perf_counter() - start


def test_5_adaptive_protocol(tmp_path, criterion):
    parts, ok = [], True
    for name, p_eject, trials in (("adaptive_multi", 0.80, 275), ("adaptive_single", 0.63, 228)):
        raw = config(name)
        assert raw["trials"] == trials
        assert ControllerConfig(**raw["controller"]).p_eject == p_eject
        s, elapsed = _adaptive(raw, tmp_path, name)
        rate, t_ms = s["success_rate"], s["mean_time_to_success_ms"]
        ok &= 0.89 <= rate <= 0.95 and 10.5 <= t_ms <= 19.5 and elapsed < 120.0
        parts.append(f"{name}: success {rate:.3f} in [0.89, 0.95], time {t_ms:.2f} ms in "
                     f"[10.5, 19.5], {elapsed:.1f} s")

        raw = config(name)
        raw["controller"]["p_eject"] = 0.98
        s, elapsed = _adaptive(raw, tmp_path, name + "_098")
        ok &= s["success_rate"] >= 0.98 and elapsed < 120.0
        parts.append(f"p_eject 0.98: {s['success_rate']:.3f} (>= 0.98)")
    criterion(5, ok, "; ".join(parts))


def _data_files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix in (".csv", ".jsonl")}


def test_6_determinism(tmp_path, criterion):
    same, detail = True, []
    for name in sorted(shipped_configs()):
        ec = load_config(shipped_configs()[name], env={})
        runs = []
        for k in ("a", "b"):
            run_experiment(ec, quick=True, output_dir=tmp_path / name / k)
            runs.append(_data_files(tmp_path / name / k))
        same &= bool(runs[0]) and runs[0] == runs[1]
        detail.append(f"{name} {len(runs[0])} files")
    cli_runs = []
    for k in ("a", "b"):
        out = tmp_path / "cli" / k
        assert main(["simulate", "-n", "3", "--duration-ms", "20", "--seed", "9", "--out-dir", str(out)]) == 0
        cli_runs.append(_data_files(out))
    same &= cli_runs[0] == cli_runs[1]
    criterion(6, same, "byte-identical re-runs: " + ", ".join(detail) + ", cli simulate")


def test_7_property_suites(criterion):
    from test_analysis import test_no_sub_floor_events_in_simulations
    from test_control import _check_path, test_success_monotone_in_p_eject
    from test_dynamics import (_first_collisions, test_collision_times_follow_mixture,
                               test_photon_counts_are_poisson)

    start = time.perf_counter()
    results = {}

    def check(name, fn, *args):
        try:
            fn(*args)
            results[name] = True
        except AssertionError:
            results[name] = False

    check("poisson chi2", lambda: [test_photon_counts_are_poisson(n) for n in ([0], [1, 1])])
    p = SimParams(initial_coupling=1.0, loss_tau_ms_cooling=1e12, loss_tau_ms_heating=1e12)
    check("collision KS", test_collision_times_follow_mixture, (p, *_first_collisions(10_000, p)))

    def paths():
        for mode in ("multi-trap", "single-trap"):
            ctrl = ControllerConfig(mode=mode)
            cfg = ctrl.cavity()
            _, shots = campaign(200, cfg, ctrl.sim_params(), ctrl, seed=17)
            for res in shots:
                _check_path(res, single_atom_window(cfg))

    check("tree paths", paths)
    check("p_eject monotone", test_success_monotone_in_p_eject)
    check("no sub-floor events", test_no_sub_floor_events_in_simulations)
    elapsed = time.perf_counter() - start
    listed = ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in results.items())
    criterion(7, all(results.values()) and elapsed < 120.0, f"{listed}, {elapsed:.1f} s (< 120 s)")


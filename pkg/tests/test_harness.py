import json

import numpy as np
import pytest
import yaml

from cavcount import io
from cavcount.cavity import CavityConfig, SpectrumPoint, spectrum
from cavcount.cli import main
from cavcount.config import (ConfigError, apply_env, diagnose, from_mapping, load_config,
                             shipped_configs, validate_config)
from cavcount.dynamics import SimParams, simulate_multi_trap
from cavcount.experiments import run_experiment


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.mark.parametrize("name", sorted(shipped_configs()))
def test_shipped_configs_validate(name):
    assert validate_config(shipped_configs()[name], env={}) == []


def test_simplex_violation_is_one_diagnostic():
    raw = {"experiment": "Collisions", "seed": 1,
           "sim": {"p_both_lost": 0.5, "p_one_lost": 0.2, "p_both_heated": 0.4}}
    problems = diagnose(raw)
    assert len(problems) == 1
    assert "p_both_lost" in problems[0] and "sum to 1" in problems[0]


def test_negative_kappa_is_one_diagnostic():
    problems = diagnose({"experiment": "Spectrum", "seed": 1, "cavity": {"kappa_hz": -5.0}})
    assert len(problems) == 1 and "kappa_hz" in problems[0]


def test_all_problems_reported_together():
    raw = {"experiment": "Nope", "trials": 0, "bogus": 1, "sim": {"p_ejekt": 0.5}}
    problems = diagnose(raw)
    assert len(problems) == 5
    text = "\n".join(problems)
    for needle in ("bogus", "experiment", "seed is required", "trials", "p_ejekt"):
        assert needle in text


def test_type_errors_name_the_key():
    problems = diagnose({"experiment": "Spectrum", "seed": 1, "cavity": {"eta": "big"}})
    assert problems == ["cavity.eta must be a number (got 'big')"]


def test_env_override(tmp_path):
    path = shipped_configs()["collisions"]
    ec = load_config(path, env={"CAVCOUNT_SEED": "3", "CAVCOUNT_SIM__P_EJECT": "0.9",
                                "OTHER_SEED": "5"})
    assert ec.seed == 3 and ec.sim["p_eject"] == 0.9
    raw = apply_env({"seed": 1}, {"CAVCOUNT_CAVITY__ETA": "oops"})
    assert diagnose({**raw, "experiment": "Spectrum"}) == ["cavity.eta must be a number (got 'oops')"]
    assert validate_config(path, env={"CAVCOUNT_CAVITY__KAPPA_HZ": "-1"}) != []


def test_unreadable_file_raises(tmp_path):
    with pytest.raises(OSError):
        validate_config(tmp_path / "missing.yaml", env={})


def test_config_round_trips_through_manifest(tmp_path):
    ec = load_config(shipped_configs()["spectrum"], env={})
    manifest = run_experiment(ec, quick=True, output_dir=tmp_path)
    assert from_mapping(manifest["config"]) == ec


def _run(config, out):
    manifest = run_experiment(load_config(config, env={}), quick=True, output_dir=out)
    return manifest, {p.name: p.read_bytes() for p in out.iterdir()}


@pytest.mark.parametrize("name", ["spectrum", "histogram", "traces", "collisions", "adaptive_multi"])
def test_reruns_are_byte_identical(tmp_path, name):
    config = shipped_configs()[name]
    m1, files1 = _run(config, tmp_path / "a")
    m2, files2 = _run(config, tmp_path / "b")
    assert m1 == m2
    assert files1 == files2
    # every artifact except the manifest itself is listed with its checksum
    assert set(files1) - {"manifest.json"} == set(m1["files"])
    for fname, digest in m1["files"].items():
        assert io.sha256(tmp_path / "a" / fname) == digest
    assert m1["seed"] == load_config(config, env={}).seed


def test_rerun_into_same_dir_leaves_no_orphans(tmp_path):
    config = shipped_configs()["traces"]
    run_experiment(load_config(config, env={}), output_dir=tmp_path)
    manifest = run_experiment(load_config(config, env={}), quick=True, output_dir=tmp_path)
    on_disk = {p.name for p in tmp_path.iterdir()} - {"manifest.json"}
    assert on_disk == set(manifest["files"])


def test_spectrum_experiment_recovers_eta(tmp_path):
    manifest = run_experiment(load_config(shipped_configs()["spectrum"], env={}), output_dir=tmp_path)
    fit = io.read_json(tmp_path / "fit.json")
    assert len(list(tmp_path.glob("spectrum_n*.csv"))) == 4
    assert abs(fit["eta"] - 21.0) < 4 * fit["eta_stderr"]
    assert set(fit) >= {"eta", "eta_stderr", "iterations", "residual"}
    assert manifest["summary"]["eta"] == fit["eta"]


def test_cli_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", str(shipped_configs()["traces"])]) == 0
    bad = write_yaml(tmp_path / "bad.yaml", {"experiment": "Spectrum", "seed": 1,
                                             "cavity": {"kappa_hz": -1.0}})
    assert main(["validate", str(bad)]) == 1
    assert "kappa_hz" in capsys.readouterr().out


def test_cli_run_exit_codes(tmp_path, capsys):
    bad = write_yaml(tmp_path / "bad.yaml", {"experiment": "Traces"})
    assert main(["run", str(bad)]) == 1
    assert "seed" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert main(["frobnicate"]) == 1
    # a valid config that cannot produce data: no bins fit in the trace
    broken = write_yaml(tmp_path / "broken.yaml", {"experiment": "Histogram", "seed": 1, "trials": 2,
                                                   "run": {"duration_ms": 1e-6}})
    assert main(["run", str(broken), "--out-dir", str(tmp_path / "o")]) == 2
    good = shipped_configs()["traces"]
    assert main(["run", str(good), "--quick", "--out-dir", str(tmp_path / "ok")]) == 0
    assert (tmp_path / "ok" / "manifest.json").exists()


def test_cli_simulate_analyze_fit(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--traps", "1,1,0", "--duration-ms", "5", "--seed", "4",
                 "--out-dir", str(sim)]) == 0
    trace = io.read_trace(sim / "trace.csv")
    assert len(trace) == 50
    assert main(["simulate", "--traps", "1,x", "--seed", "1", "--out-dir", str(sim)]) == 1
    assert main(["simulate", "--out-dir", str(sim)]) == 1
    ana = tmp_path / "ana"
    assert main(["analyze", str(sim / "*.csv"), "--out-dir", str(ana), "--emit-hist"]) == 0
    assert (ana / "events.jsonl").exists() and (ana / "transmission_hist.csv").exists()
    assert io.read_json(ana / "report.json")["n_files"] == 1
    assert main(["analyze", str(tmp_path / "none*.csv")]) == 1

    cfg = CavityConfig(delta_ca_hz=-50e6)
    xs = np.linspace(-10, 10, 41)
    spectra = tmp_path / "spectra.csv"
    io.write_spectra(spectra, [(n, spectrum(n, cfg, xs)) for n in range(3)])
    out = tmp_path / "fit.json"
    assert main(["fit", str(spectra), "--delta-ca-hz", "-50e6", "--out", str(out)]) == 0
    assert io.read_json(out)["eta"] == pytest.approx(21.0, abs=1e-6)


def test_cli_adapt(tmp_path, capsys):
    assert main(["adapt", "--trials", "20", "--seed", "5", "--out-dir", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert 0.0 <= summary["success_rate"] <= 1.0
    assert len(io.read_jsonl(tmp_path / "trials.jsonl")) >= 20
    assert main(["adapt", "--p-eject", "2.0", "--out-dir", str(tmp_path)]) == 1


def test_trace_csv_round_trip(tmp_path):
    cfg = CavityConfig(bin_us=20, photons_per_bin_empty=200.0)
    trace, truth = simulate_multi_trap([2], cfg, SimParams(), 3.0, seed=1)
    io.write_trace(tmp_path / "t.csv", trace)
    back = io.read_trace(tmp_path / "t.csv")
    assert np.array_equal(back.photons, trace.photons)
    assert np.array_equal(back.t_start_us, trace.t_start_us)
    assert np.allclose(back.t_est, trace.t_est, rtol=0, atol=0)
    assert (back.bin_us, back.photons_per_bin_empty) == (20, 200.0)
    io.write_jsonl(tmp_path / "truth.jsonl", truth)
    assert io.read_truth_events(tmp_path / "truth.jsonl") == truth


def test_trace_reader_infers_missing_metadata(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("# {}\nt_start_us,photons,t_est\n0,500,0.5\n100,800,0.8\n")
    trace = io.read_trace(path)
    assert (trace.bin_us, trace.photons_per_bin_empty) == (100, 1000.0)
    path.write_text("t_start_us,photons,t_est\n")
    with pytest.raises(ValueError):
        io.read_trace(path)


def test_spectra_round_trip(tmp_path):
    data = [(0, [SpectrumPoint(0.1, 0.99, 0, 0.01)]),
            (2, [SpectrumPoint(-1.0, 0.25, 2, 0.02), SpectrumPoint(1.0, 0.3, 2, 0.02)])]
    io.write_spectra(tmp_path / "s.csv", data)
    assert io.read_spectra(tmp_path / "s.csv") == data


def test_json_is_plain_and_strict():
    assert io.dumps({"a": np.float64(1.5), "b": float("nan"), "c": np.arange(2)}) == \
        '{"a": 1.5, "b": null, "c": [0, 1]}'
    with pytest.raises(ConfigError):
        from_mapping({"experiment": "Spectrum"})

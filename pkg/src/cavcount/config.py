"""Experiment configuration: YAML files with one section per component.

Any key can be overridden from the environment: ``CAVCOUNT_SEED=3`` for a
top-level key, ``CAVCOUNT_SIM__P_EJECT=0.9`` for ``sim.p_eject``. Values
are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import yaml

from .cavity import CavityConfig, cavity_problems
from .control import ControllerConfig, controller_problems
from .dynamics import SimParams, sim_params_problems

ENV_PREFIX = "CAVCOUNT_"
EXPERIMENTS = ("Spectrum", "Histogram", "Traces", "Collisions", "Adaptive")
TOP_LEVEL = ("experiment", "seed", "trials", "output_dir")
SECTIONS = ("cavity", "sim", "controller", "analysis", "run")

ANALYSIS_DEFAULTS = {
    "noise_floor": 0.07,
    "window": 5,
    "z": 4.0,
    "collision_atoms": 1.25,
    "plateau_ms": 2.0,
    "n_max": 3,
    "hist_width": 0.01,
}

RUN_DEFAULTS = {
    "Spectrum": {"n_max": 3, "x_min": -10.0, "x_max": 10.0, "n_points": 101, "sigma": 0.01,
                 "free_kappa": False},
    "Histogram": {"n_traps": 4, "p_load": 0.5, "duration_ms": 50.0, "repump_per_ms": 0.05,
                  "depump_per_ms": 0.05},
    "Traces": {"n_traps": 4, "p_load": 0.5, "duration_ms": 50.0, "repump_per_ms": 0.05,
               "depump_per_ms": 0.05},
    "Collisions": {"duration_ms": 60.0, "load_lambda": 2.75, "min_atoms": 2, "max_atoms": 8,
                   "write_traces": False},
    "Adaptive": {"workers": 1, "keep_traces": False},
}


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


SECTION_KEYS = {
    "cavity": _field_names(CavityConfig),
    "sim": _field_names(SimParams),
    "controller": _field_names(ControllerConfig),
    "analysis": set(ANALYSIS_DEFAULTS),
}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    trials: int = 1
    output_dir: str = "out"
    cavity: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    def cavity_config(self) -> CavityConfig:
        return CavityConfig(**self.cavity)

    def sim_params(self) -> SimParams:
        return SimParams(**self.sim)

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(**self.controller)

    def analysis_options(self) -> dict:
        return {**ANALYSIS_DEFAULTS, **self.analysis}

    def run_options(self) -> dict:
        return {**RUN_DEFAULTS.get(self.experiment, {}), **self.run}

    def as_dict(self) -> dict:
        return asdict(self)


def apply_env(raw: dict, env: Mapping[str, str]) -> dict:
    out = copy.deepcopy(raw)
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(env[name])
        if len(path) == 1:
            out[path[0]] = value
        elif len(path) == 2:
            section = out.setdefault(path[0], {})
            if isinstance(section, dict):
                section[path[1]] = value
    return out


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _type_problems(section: str, values: dict, defaults: dict) -> list[str]:
    out = []
    for key, value in values.items():
        ref = defaults.get(key)
        if ref is None or value is None:
            continue
        if isinstance(ref, bool):
            if not isinstance(value, bool):
                out.append(f"{section}.{key} must be true/false (got {value!r})")
        elif _is_number(ref) and not _is_number(value):
            out.append(f"{section}.{key} must be a number (got {value!r})")
        elif isinstance(ref, int) and not isinstance(ref, bool) and isinstance(value, float) \
                and not value.is_integer():
            out.append(f"{section}.{key} must be an integer (got {value!r})")
    return out


def diagnose(raw) -> list[str]:
    """Every problem with a parsed config mapping; empty means valid."""
    if not isinstance(raw, dict):
        return ["config must be a mapping of keys to values"]
    out = []
    for key in raw:
        if key not in TOP_LEVEL and key not in SECTIONS:
            out.append(f"unknown key {key!r}")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        out.append(f"experiment must be one of {', '.join(EXPERIMENTS)} (got {exp!r})")
    seed = raw.get("seed")
    if seed is None:
        out.append("seed is required")
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        out.append(f"seed must be a non-negative integer (got {seed!r})")
    trials = raw.get("trials", 1)
    if not isinstance(trials, int) or isinstance(trials, bool) or trials < 1:
        out.append(f"trials must be an integer >= 1 (got {trials!r})")
    if not isinstance(raw.get("output_dir", "out"), str):
        out.append("output_dir must be a string")

    sections = {}
    for name in SECTIONS:
        value = raw.get(name) or {}
        if not isinstance(value, dict):
            out.append(f"{name} must be a mapping")
            value = {}
        sections[name] = value
    defaults = {
        "cavity": asdict(CavityConfig()),
        "sim": asdict(SimParams()),
        "controller": {**asdict(ControllerConfig()), "mode": "multi-trap"},
        "analysis": ANALYSIS_DEFAULTS,
        "run": RUN_DEFAULTS.get(exp, {}),
    }
    for name in ("cavity", "sim", "controller", "analysis"):
        for key in sections[name]:
            if key not in SECTION_KEYS[name]:
                out.append(f"unknown key {name}.{key}")
    if exp in RUN_DEFAULTS:
        for key in sections["run"]:
            if key not in RUN_DEFAULTS[exp]:
                out.append(f"unknown key run.{key} for {exp}")
    typed = []
    for name in SECTIONS:
        typed += _type_problems(name, sections[name], defaults[name])
    out += typed
    if typed:
        return out

    known = {n: {k: v for k, v in sections[n].items() if k in keys}
             for n, keys in SECTION_KEYS.items()}
    cavity = {**defaults["cavity"], **known["cavity"]}
    cavity_msgs = cavity_problems(cavity)
    out += [f"cavity: {m}" for m in cavity_msgs]
    cfg = None if cavity_msgs else CavityConfig(**cavity)
    out += [f"sim: {m}" for m in sim_params_problems({**defaults["sim"], **known["sim"]}, cfg)]
    if exp == "Adaptive" or known["controller"]:
        ctrl = {**{f.name: f.default for f in fields(ControllerConfig)}, **known["controller"]}
        out += [f"controller: {m}" for m in controller_problems(ctrl)]

    a = {**ANALYSIS_DEFAULTS, **known["analysis"]}
    for key in ("noise_floor", "z", "collision_atoms", "plateau_ms", "hist_width"):
        if not a[key] > 0:
            out.append(f"analysis.{key} must be > 0 (got {a[key]})")
    for key in ("window", "n_max"):
        if a[key] < 1:
            out.append(f"analysis.{key} must be >= 1 (got {a[key]})")
    if a["n_max"] > 4:
        out.append(f"analysis.n_max must be <= 4 (got {a['n_max']})")
    out += _run_problems(exp, {**RUN_DEFAULTS.get(exp, {}), **sections["run"]})
    return out


def _run_problems(exp, r: dict) -> list[str]:
    out = []
    for key in ("duration_ms", "sigma", "n_points", "n_traps", "load_lambda"):
        if key in r and not r[key] > 0:
            out.append(f"run.{key} must be > 0 (got {r[key]})")
    for key in ("p_load",):
        if key in r and not 0 <= r[key] <= 1:
            out.append(f"run.{key} must lie in [0, 1] (got {r[key]})")
    for key in ("repump_per_ms", "depump_per_ms"):
        if key in r and r[key] < 0:
            out.append(f"run.{key} must be >= 0 (got {r[key]})")
    if exp == "Spectrum" and not r["x_min"] < r["x_max"]:
        out.append("run.x_min must be below run.x_max")
    if exp == "Collisions" and not 0 <= r["min_atoms"] <= r["max_atoms"]:
        out.append("run.min_atoms must lie in [0, run.max_atoms]")
    if "workers" in r and r["workers"] < 1:
        out.append(f"run.workers must be >= 1 (got {r['workers']})")
    return out


def read_raw(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error: {exc}"]) from exc
    return raw if raw is not None else {}


def validate_config(path, env: Mapping[str, str] | None = None) -> list[str]:
    """All diagnostics for the config at ``path`` after env overrides; [] if valid."""
    try:
        raw = read_raw(path)
    except ConfigError as exc:
        return exc.diagnostics
    return diagnose(apply_env(raw, os.environ if env is None else env))


def from_mapping(raw: dict) -> ExperimentConfig:
    problems = diagnose(raw)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        experiment=raw["experiment"],
        seed=int(raw["seed"]),
        trials=int(raw.get("trials", 1)),
        output_dir=raw.get("output_dir", "out"),
        **{name: dict(raw.get(name) or {}) for name in SECTIONS},
    )


def load_config(path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    raw = apply_env(read_raw(path), os.environ if env is None else env)
    return from_mapping(raw)


def shipped_configs() -> dict[str, Path]:
    root = Path(__file__).parent / "configs"
    return {p.stem: p for p in sorted(root.glob("*.yaml"))}

"""Seeded Monte Carlo of atoms in tweezers observed through cavity transmission.

Time runs on a fixed tick grid (``SimParams.tick_us``). Between stochastic
events every quantity evolves deterministically, so the engine draws the
tick of the next event for each process directly (geometric waiting times
for constant rates, inversion of the integrated hazard for collisions)
instead of flipping a coin every tick. Per-tick event probabilities are the
same as a tick-by-tick Bernoulli loop.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from .actions import Action, ActionKind
from .cavity import CavityConfig, transmission

MAX_ATOMS = 16

# one generator per stochastic process, all derived from the master seed
STREAM_NAMES = ("photons", "jumps", "collisions", "loss", "push", "loading")


class Manifold(str, Enum):
    F3 = "F3"
    F4 = "F4"


class EventKind(str, Enum):
    JUMP = "Jump"
    COLLISION = "Collision"
    BACKGROUND_LOSS = "BackgroundLoss"
    PUSH_EJECT = "PushEject"
    PUSH_LEAK = "PushLeak"
    PUSH_FAIL = "PushFail"


class CollisionOutcome(str, Enum):
    BOTH_LOST = "both_lost"
    ONE_LOST = "one_lost"
    BOTH_HEATED = "both_heated"


@dataclass(frozen=True)
class SimParams:
    pump_tau_ms: float = 1.1
    collision_fast_fraction: float = 0.20
    collision_fast_tau_us: float = 50.0
    collision_slow_tau_ms: float = 9.0
    p_both_lost: float = 0.50
    p_one_lost: float = 0.15
    p_both_heated: float = 0.35
    heated_coupling: float = 0.3
    recool_tau_ms: float = 5.0
    loss_tau_ms_cooling: float = 100.0
    loss_tau_ms_heating: float = 10.0
    # 1 - exp(-rate * 1 ms) = 0.30 per atom per weak-repump pulse
    repump_rate_per_ms: float = -math.log(0.7)
    depump_rate_per_ms: float = 20.0
    tick_us: int = 10
    initial_coupling: float = 0.5
    p_eject: float = 0.80
    p_leak: float = 0.78
    push_fail_coupling: float = 0.1
    # hot atoms are spread out in the trap: weight each pair's hazard by c_i * c_j
    coupling_weighted_collisions: bool = True
    # multiplies the collision hazard, e.g. for a weaker probe; 0 disables collisions
    collision_rate_scale: float = 1.0

    def problems(self, cfg: CavityConfig | None = None) -> list[str]:
        return sim_params_problems(asdict(self), cfg)

    def validate(self, cfg: CavityConfig | None = None) -> None:
        problems = self.problems(cfg)
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def tick_ms(self) -> float:
        return self.tick_us / 1000.0

    def loss_rate_per_ms(self, cfg: CavityConfig) -> float:
        """Background loss rate for continuous probing; cavity heating when Delta < 0."""
        tau = self.loss_tau_ms_heating if cfg.delta_ca_hz < 0 else self.loss_tau_ms_cooling
        return 1.0 / tau


def sim_params_problems(values: dict, cfg: CavityConfig | None = None) -> list[str]:
    out = []
    total = values["p_both_lost"] + values["p_one_lost"] + values["p_both_heated"]
    if abs(total - 1.0) > 1e-9:
        out.append(
            f"collision outcome probabilities p_both_lost + p_one_lost + p_both_heated "
            f"must sum to 1 (got {total:g})"
        )
    for name in ("p_both_lost", "p_one_lost", "p_both_heated", "collision_fast_fraction",
                 "p_eject", "p_leak"):
        if not 0.0 <= values[name] <= 1.0:
            out.append(f"{name} must lie in [0, 1] (got {values[name]})")
    for name in ("heated_coupling", "initial_coupling", "push_fail_coupling"):
        if not 0.0 <= values[name] <= 1.0:
            out.append(f"{name} must lie in [0, 1] (got {values[name]})")
    for name in ("pump_tau_ms", "collision_fast_tau_us", "collision_slow_tau_ms",
                 "recool_tau_ms", "loss_tau_ms_cooling", "loss_tau_ms_heating", "tick_us"):
        if not values[name] > 0:
            out.append(f"{name} must be > 0 (got {values[name]})")
    for name in ("repump_rate_per_ms", "depump_rate_per_ms", "collision_rate_scale"):
        if values[name] < 0:
            out.append(f"{name} must be >= 0 (got {values[name]})")
    if cfg is not None and values["tick_us"] > 0 and cfg.bin_us % values["tick_us"]:
        out.append(f"tick_us ({values['tick_us']}) must divide bin_us ({cfg.bin_us})")
    return out


@dataclass
class AtomRecord:
    """One atom. ``coupling`` is the value at ``ref_tick``; see :meth:`coupling_at`."""

    present: bool = True
    manifold: Manifold = Manifold.F4
    coupling: float = 1.0
    trap: int = 0
    heated: bool = False
    ref_tick: int = 0

    def relax_tau_ms(self, params: SimParams) -> float:
        return params.recool_tau_ms if self.heated else params.pump_tau_ms

    def coupling_at(self, tick, params: SimParams):
        age = (np.asarray(tick, dtype=float) - self.ref_tick) * params.tick_ms
        return 1.0 - (1.0 - self.coupling) * np.exp(-age / self.relax_tau_ms(params))

    def rebase(self, tick: int, params: SimParams) -> None:
        self.coupling = float(self.coupling_at(tick, params))
        self.ref_tick = tick


@dataclass(frozen=True)
class TruthEvent:
    t_us: int
    kind: EventKind
    atoms_before: int
    atoms_after: int
    outcome: str | None = None
    trap: int = 0

    def as_dict(self) -> dict:
        d = {"t_us": self.t_us, "kind": self.kind.value}
        if self.outcome is not None:
            d["outcome"] = self.outcome
        d["atoms_before"] = self.atoms_before
        d["atoms_after"] = self.atoms_after
        d["trap"] = self.trap
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TruthEvent":
        return cls(int(d["t_us"]), EventKind(d["kind"]), int(d["atoms_before"]),
                   int(d["atoms_after"]), d.get("outcome"), int(d.get("trap", 0)))


@dataclass(frozen=True)
class TraceBin:
    t_start_us: int
    photons: int
    t_est: float


@dataclass
class Trace:
    """Binned photon counts. Truth arrays are simulation-only and never persisted."""

    t_start_us: np.ndarray
    photons: np.ndarray
    photons_per_bin_empty: float
    bin_us: int
    truth_f4: np.ndarray | None = None
    truth_n_eff: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.photons)

    @property
    def t_est(self) -> np.ndarray:
        return self.photons / self.photons_per_bin_empty

    @property
    def bins(self) -> list[TraceBin]:
        return [TraceBin(int(t), int(p), float(e))
                for t, p, e in zip(self.t_start_us, self.photons, self.t_est)]

    def window(self, start: int, stop: int) -> "Trace":
        sl = slice(start, stop)
        return Trace(self.t_start_us[sl], self.photons[sl], self.photons_per_bin_empty,
                     self.bin_us,
                     None if self.truth_f4 is None else self.truth_f4[sl],
                     None if self.truth_n_eff is None else self.truth_n_eff[sl],
                     dict(self.meta))

    @classmethod
    def empty(cls, cfg: CavityConfig) -> "Trace":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                   cfg.photons_per_bin_empty, cfg.bin_us,
                   np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def concat(cls, traces: Sequence["Trace"], meta: dict | None = None) -> "Trace":
        first = traces[0]
        have_truth = all(t.truth_f4 is not None for t in traces)
        return cls(
            np.concatenate([t.t_start_us for t in traces]),
            np.concatenate([t.photons for t in traces]),
            first.photons_per_bin_empty,
            first.bin_us,
            np.concatenate([t.truth_f4 for t in traces]) if have_truth else None,
            np.concatenate([t.truth_n_eff for t in traces]) if have_truth else None,
            meta if meta is not None else dict(first.meta),
        )


class SimStreams:
    """Independent named generators derived from one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        for i, name in enumerate(STREAM_NAMES):
            ss = np.random.SeedSequence(self.seed, spawn_key=(i,))
            setattr(self, name, np.random.Generator(np.random.PCG64(ss)))


@dataclass(frozen=True)
class Light:
    """Constant illumination over one evolution segment."""

    probe: bool = True
    repump_per_ms: float = 0.0
    depump_per_ms: float = 0.0
    loss_per_ms: float = 0.0


@dataclass(frozen=True)
class Segment:
    """A piece of a continuous-probing schedule for :func:`simulate`."""

    duration_ms: float
    repump_per_ms: float = 0.0
    depump_per_ms: float = 0.0


@dataclass
class TrapEnsemble:
    atoms: list[AtomRecord]
    n_traps: int = 1
    tick: int = 0
    events: list[TruthEvent] = field(default_factory=list)

    @classmethod
    def load(cls, n_per_trap: Sequence[int], params: SimParams,
             manifold: Manifold = Manifold.F4, coupling: float | None = None) -> "TrapEnsemble":
        c0 = params.initial_coupling if coupling is None else coupling
        atoms = [AtomRecord(True, manifold, c0, trap)
                 for trap, n in enumerate(n_per_trap) for _ in range(int(n))]
        return cls(atoms, max(len(n_per_trap), 1))

    @property
    def n_present(self) -> int:
        return sum(a.present for a in self.atoms)

    def count(self, manifold: Manifold) -> int:
        return sum(a.present and a.manifold is manifold for a in self.atoms)

    def time_us(self, params: SimParams) -> int:
        return self.tick * params.tick_us

    def n_eff(self, params: SimParams, tick: int | None = None) -> float:
        t = self.tick if tick is None else tick
        return float(sum(a.coupling_at(t, params) for a in self.atoms
                         if a.present and a.manifold is Manifold.F4))


def pair_survival(t_ms, params: SimParams):
    """Probability that a given co-trapped pair has not collided by ``t_ms`` after load."""
    f = params.collision_fast_fraction
    t_ms = np.asarray(t_ms, dtype=float)
    return (f * np.exp(-t_ms / (params.collision_fast_tau_us / 1000.0))
            + (1.0 - f) * np.exp(-t_ms / params.collision_slow_tau_ms))


def _collision_tick(now: int, end: int, pairs: int, params: SimParams, rng) -> int | None:
    """Tick at which the next collision among ``pairs`` pairs takes effect, if before ``end``."""
    dt = params.tick_ms
    s_now = float(pair_survival(now * dt, params))
    target = s_now * rng.random() ** (1.0 / (pairs * params.collision_rate_scale))
    if float(pair_survival(end * dt, params)) > target:
        return None
    if s_now <= target:
        return now + 1
    t = brentq(lambda tm: float(pair_survival(tm, params)) - target, now * dt, end * dt,
               xtol=1e-9 * dt)
    return max(now + 1, math.ceil(t / dt - 1e-9))


def _log(ens: TrapEnsemble, params, kind, before, after, outcome=None, trap=0):
    ens.events.append(TruthEvent(ens.time_us(params), kind, before, after, outcome, trap))


def _fill(ens: TrapEnsemble, a: int, b: int, offset: int, n_eff, f4, params):
    if b <= a:
        return
    mid = np.arange(a, b) + 0.5
    for atom in ens.atoms:
        if atom.present and atom.manifold is Manifold.F4:
            n_eff[a - offset:b - offset] += atom.coupling_at(mid, params)
            f4[a - offset:b - offset] += 1


def _apply_collision(ens: TrapEnsemble, trap: int, params: SimParams, rng) -> None:
    now = ens.tick
    members = [a for a in ens.atoms
               if a.present and a.manifold is Manifold.F4 and a.trap == trap]
    i, j = rng.choice(len(members), size=2, replace=False)
    pair = [members[i], members[j]]
    if params.coupling_weighted_collisions:
        # thinning of the cold-pair hazard, exact because c_i * c_j <= 1
        overlap = float(pair[0].coupling_at(now, params) * pair[1].coupling_at(now, params))
        if rng.random() >= overlap:
            return
    u = rng.random()
    before = ens.n_present
    if u < params.p_both_lost:
        outcome = CollisionOutcome.BOTH_LOST
        for a in pair:
            a.present = False
    elif u < params.p_both_lost + params.p_one_lost:
        outcome = CollisionOutcome.ONE_LOST
        lost = int(rng.integers(2))
        pair[lost].present = False
        pair = [pair[1 - lost]]
    else:
        outcome = CollisionOutcome.BOTH_HEATED
    if outcome is not CollisionOutcome.BOTH_LOST:
        for a in pair:
            a.rebase(now, params)
            a.coupling = min(a.coupling, params.heated_coupling)
            a.heated = True
    _log(ens, params, EventKind.COLLISION, before, ens.n_present, outcome.value, trap)


def evolve(ens: TrapEnsemble, n_ticks: int, light: Light, params: SimParams,
           streams: SimStreams) -> tuple[np.ndarray, np.ndarray]:
    """Advance ``ens`` by ``n_ticks`` under constant ``light``.

    Returns per-tick effective coupled atom number and F=4 atom count.
    Collisions are light assisted: they need the probe and act only among
    F=4 atoms sharing a trap.
    """
    start = ens.tick
    end = start + n_ticks
    n_eff = np.zeros(n_ticks)
    f4 = np.zeros(n_ticks, dtype=np.int64)
    dt = params.tick_ms
    p_rep = -math.expm1(-light.repump_per_ms * dt)
    p_dep = -math.expm1(-light.depump_per_ms * dt)
    p_loss = -math.expm1(-light.loss_per_ms * dt)

    while True:
        now = ens.tick
        candidates = []  # (tick, priority, index, kind); priority breaks same-tick ties
        if light.probe and params.collision_rate_scale > 0:
            for trap in range(ens.n_traps):
                k = sum(a.present and a.manifold is Manifold.F4 and a.trap == trap
                        for a in ens.atoms)
                if k >= 2:
                    te = _collision_tick(now, end, k * (k - 1) // 2, params, streams.collisions)
                    if te is not None:
                        candidates.append((te, 0, trap, "collision"))
        for idx, atom in enumerate(ens.atoms):
            if not atom.present:
                continue
            if p_loss > 0:
                te = now + int(streams.loss.geometric(p_loss))
                if te <= end:
                    candidates.append((te, 1, idx, "loss"))
            p = p_rep if atom.manifold is Manifold.F3 else p_dep
            if p > 0:
                te = now + int(streams.jumps.geometric(p))
                if te <= end:
                    candidates.append((te, 2, idx, "jump"))
        if not candidates:
            _fill(ens, now, end, start, n_eff, f4, params)
            ens.tick = end
            return n_eff, f4

        te, _, idx, kind = min(candidates)
        _fill(ens, now, te, start, n_eff, f4, params)
        ens.tick = te
        if kind == "collision":
            _apply_collision(ens, idx, params, streams.collisions)
        elif kind == "loss":
            atom = ens.atoms[idx]
            before = ens.n_present
            atom.present = False
            _log(ens, params, EventKind.BACKGROUND_LOSS, before, before - 1, trap=atom.trap)
        else:
            atom = ens.atoms[idx]
            atom.rebase(te, params)
            if atom.manifold is Manifold.F3:
                atom.manifold = Manifold.F4
                outcome = "F3->F4"
            else:
                atom.manifold = Manifold.F3
                outcome = "F4->F3"
            n = ens.n_present
            _log(ens, params, EventKind.JUMP, n, n, outcome, atom.trap)


def _detect(ens: TrapEnsemble, n_ticks: int, light: Light, cfg: CavityConfig,
            params: SimParams, streams: SimStreams) -> Trace:
    per_bin = cfg.bin_us // params.tick_us
    if ens.tick % per_bin or n_ticks % per_bin:
        raise ValueError("probe windows must start and end on detection bin edges")
    t0_us = ens.time_us(params)
    n_eff, f4 = evolve(ens, n_ticks, light, params, streams)
    t_tick = transmission(n_eff, cfg.x, cfg.y, cfg.eta)
    n_bins = n_ticks // per_bin
    expected = cfg.photons_per_bin_empty * np.asarray(t_tick).reshape(n_bins, per_bin).mean(axis=1)
    photons = streams.photons.poisson(expected).astype(np.int64)
    starts = t0_us + cfg.bin_us * np.arange(n_bins, dtype=np.int64)
    return Trace(starts, photons, cfg.photons_per_bin_empty, cfg.bin_us,
                 f4.reshape(n_bins, per_bin)[:, per_bin // 2].copy(),
                 n_eff.reshape(n_bins, per_bin).mean(axis=1))


def _ticks(duration_ms: float, params: SimParams) -> int:
    n = duration_ms * 1000.0 / params.tick_us
    if abs(n - round(n)) > 1e-6:
        raise ValueError(f"duration {duration_ms} ms is not a whole number of ticks")
    return int(round(n))


def _meta(cfg, params, seed, **extra) -> dict:
    return {"cavity": asdict(cfg), "sim": asdict(params), "seed": int(seed), **extra}


def simulate_multi_trap(
    n_per_trap: Sequence[int],
    cfg: CavityConfig,
    params: SimParams,
    duration_ms: float,
    seed: int,
    schedule: Iterable[Segment] | None = None,
    initial_coupling: float | None = None,
) -> tuple[Trace, list[TruthEvent]]:
    """Continuously probed run of several tweezers sharing the cavity mode.

    Collisions happen only between atoms of the same trap. ``schedule``
    switches repump/depump light on and off; by default no hyperfine light.
    """
    params.validate(cfg)
    n_per_trap = [int(n) for n in n_per_trap]
    if any(n < 0 for n in n_per_trap) or sum(n_per_trap) > MAX_ATOMS:
        raise ValueError(f"atom numbers must be >= 0 with total <= {MAX_ATOMS}")
    if duration_ms <= 0:
        raise ValueError("duration_ms must be positive")
    segments = list(schedule) if schedule is not None else [Segment(duration_ms)]
    if abs(sum(s.duration_ms for s in segments) - duration_ms) > 1e-9:
        raise ValueError("schedule durations must add up to duration_ms")

    streams = SimStreams(seed)
    ens = TrapEnsemble.load(n_per_trap, params, coupling=initial_coupling)
    loss = params.loss_rate_per_ms(cfg)
    pieces = [
        _detect(ens, _ticks(s.duration_ms, params),
                Light(True, s.repump_per_ms, s.depump_per_ms, loss), cfg, params, streams)
        for s in segments
    ]
    meta = _meta(cfg, params, seed, n_per_trap=n_per_trap, duration_ms=duration_ms,
                 initial_coupling=params.initial_coupling if initial_coupling is None
                 else initial_coupling)
    return Trace.concat(pieces, meta), ens.events


def simulate(n_initial: int, cfg: CavityConfig, params: SimParams, duration_ms: float,
             seed: int, **kwargs) -> tuple[Trace, list[TruthEvent]]:
    """All atoms in one trap; see :func:`simulate_multi_trap`."""
    return simulate_multi_trap([n_initial], cfg, params, duration_ms, seed, **kwargs)


def apply_action(ens: TrapEnsemble, action: Action, cfg: CavityConfig, params: SimParams,
                 streams: SimStreams, loss_per_ms: float | None = None) -> Trace:
    """Run one protocol action on ``ens`` in place; returns the photon bins it produced.

    Only optical pumping and atom checks have the probe on, so the other
    actions return an empty trace.
    """
    if not isinstance(action, Action):
        raise TypeError(f"unknown action {action!r}")
    n_ticks = _ticks(action.duration_us / 1000.0, params)
    loss = params.loss_rate_per_ms(cfg) if loss_per_ms is None else loss_per_ms
    kind = action.kind

    if kind is ActionKind.OPTICAL_PUMPING:
        return _detect(ens, n_ticks, Light(True, loss_per_ms=loss), cfg, params, streams)
    if kind is ActionKind.ATOM_CHECK:
        if action.with_repumper:
            for atom in ens.atoms:
                if atom.present and atom.manifold is Manifold.F3:
                    atom.rebase(ens.tick, params)
                    atom.manifold = Manifold.F4
                    n = ens.n_present
                    _log(ens, params, EventKind.JUMP, n, n, "F3->F4", atom.trap)
        return _detect(ens, n_ticks, Light(True, loss_per_ms=loss), cfg, params, streams)
    if kind is ActionKind.DEPUMPING:
        evolve(ens, n_ticks, Light(False, depump_per_ms=params.depump_rate_per_ms,
                                   loss_per_ms=loss), params, streams)
        return Trace.empty(cfg)
    if kind is ActionKind.WEAK_REPUMPING:
        evolve(ens, n_ticks, Light(False, repump_per_ms=params.repump_rate_per_ms,
                                   loss_per_ms=loss), params, streams)
        return Trace.empty(cfg)
    if kind is ActionKind.PUSH_OUT:
        evolve(ens, n_ticks, Light(False, loss_per_ms=loss), params, streams)
        _push(ens, params, streams.push)
        return Trace.empty(cfg)
    raise ValueError(f"unknown action kind {kind!r}")


def _push(ens: TrapEnsemble, params: SimParams, rng) -> None:
    """Eject F=3 atoms; a failure either leaks the atom to F=4 (cold) or leaves it hot in F=3."""
    for atom in ens.atoms:
        if not (atom.present and atom.manifold is Manifold.F3):
            continue
        before = ens.n_present
        if rng.random() < params.p_eject:
            atom.present = False
            _log(ens, params, EventKind.PUSH_EJECT, before, before - 1, trap=atom.trap)
        elif rng.random() < params.p_leak:
            atom.rebase(ens.tick, params)
            atom.manifold = Manifold.F4
            _log(ens, params, EventKind.PUSH_LEAK, before, before, trap=atom.trap)
        else:
            atom.rebase(ens.tick, params)
            atom.coupling = min(atom.coupling, params.push_fail_coupling)
            atom.heated = True
            _log(ens, params, EventKind.PUSH_FAIL, before, before, trap=atom.trap)


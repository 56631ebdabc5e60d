"""Adaptive single-atom loading: a pure decision function closed against the simulator."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .actions import Action, ActionKind
from .cavity import CavityConfig
from .dynamics import MAX_ATOMS, SimParams, SimStreams, Trace, TrapEnsemble, TruthEvent, apply_action


class Phase(str, Enum):
    INIT = "Init"
    PUMPING = "Pumping"
    CYCLING = "Cycling"
    POST_PUSH = "PostPush"
    DONE = "Done"


class FailureMode(str, Enum):
    ATOM_LOSS = "AtomLoss"
    EJECTION_ERROR = "EjectionError"
    ITERATION_LIMIT = "IterationLimit"
    # initial occupancy below two atoms: excluded from statistics
    REJECTED = "Rejected"


MODES = ("multi-trap", "single-trap")


@dataclass(frozen=True)
class ControllerConfig:
    """Protocol settings; ``None`` fields take the mode's default."""

    mode: str = "multi-trap"
    delta_ca_hz: float | None = None
    p_eject: float | None = None
    max_iterations: int | None = None
    n_traps: int | None = None
    # push-out escape channel and probe-driven collision hazard; both depend on the trap
    p_leak: float | None = None
    collision_rate_scale: float | None = None
    # per-trap loading probability (multi-trap) / Poisson mean (single trap)
    p_load: float = 0.55
    load_mean: float = 1.2
    loss_tau_ms: float = 3000.0
    settle_ms: float = 10.0
    postselect: bool = True

    def __post_init__(self):
        problems = controller_problems(asdict(self))
        if problems:
            raise ValueError("; ".join(problems))
        multi = self.mode == "multi-trap"
        defaults = {
            "delta_ca_hz": -73e6 if multi else -58e6,
            "p_eject": 0.80 if multi else 0.63,
            "max_iterations": 25 if multi else 50,
            "n_traps": 4 if multi else 1,
            "p_leak": 0.78 if multi else 0.92,
            "collision_rate_scale": 1.0 if multi else 0.3,
        }
        for name, value in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)

    def cavity(self, base: CavityConfig | None = None) -> CavityConfig:
        base = base or CavityConfig()
        return replace(base, delta_ca_hz=self.delta_ca_hz, delta_pc_hz=0.0)

    def sim_params(self, base: SimParams | None = None) -> SimParams:
        return replace(
            base or SimParams(),
            p_eject=self.p_eject,
            p_leak=self.p_leak,
            collision_rate_scale=self.collision_rate_scale,
        )


def controller_problems(values: dict) -> list[str]:
    out = []
    if values["mode"] not in MODES:
        out.append(f"mode must be one of {MODES} (got {values['mode']!r})")
    p = values.get("p_eject")
    if p is not None and not 0.0 <= p <= 1.0:
        out.append(f"p_eject must lie in [0, 1] (got {p})")
    for name in ("p_leak",):
        v = values.get(name)
        if v is not None and not 0.0 <= v <= 1.0:
            out.append(f"{name} must lie in [0, 1] (got {v})")
    v = values.get("collision_rate_scale")
    if v is not None and not v >= 0:
        out.append(f"collision_rate_scale must be >= 0 (got {v})")
    m = values.get("max_iterations")
    if m is not None and m < 1:
        out.append(f"max_iterations must be >= 1 (got {m})")
    n = values.get("n_traps")
    if n is not None and not 1 <= n <= MAX_ATOMS:
        out.append(f"n_traps must lie in [1, {MAX_ATOMS}] (got {n})")
    if not 0.0 <= values["p_load"] <= 1.0:
        out.append(f"p_load must lie in [0, 1] (got {values['p_load']})")
    if values["load_mean"] < 0:
        out.append(f"load_mean must be >= 0 (got {values['load_mean']})")
    for name in ("loss_tau_ms",):
        if not values[name] > 0:
            out.append(f"{name} must be > 0 (got {values[name]})")
    if values["settle_ms"] < 0:
        out.append(f"settle_ms must be >= 0 (got {values['settle_ms']})")
    return out


def single_atom_window(cfg: CavityConfig) -> tuple[float, float]:
    """Midpoints between the 2|1 and 1|0 atom levels at the operating point."""
    t0, t1, t2 = (float(cfg.level(n)) for n in (0, 1, 2))
    return 0.5 * (t1 + t2), 0.5 * (t0 + t1)


@dataclass(frozen=True)
class ControllerState:
    phase: Phase
    last_action: ActionKind | None
    iteration: int
    window: tuple[float, float]
    max_iterations: int

    def __post_init__(self):
        if not self.window[0] < self.window[1]:
            raise ValueError("window must satisfy t_low < t_high")
        if not 0 <= self.iteration <= self.max_iterations:
            raise ValueError("iteration must lie in [0, max_iterations]")

    @classmethod
    def initial(cls, window: tuple[float, float], max_iterations: int) -> "ControllerState":
        return cls(Phase.INIT, None, 0, window, max_iterations)


@dataclass(frozen=True)
class Terminate:
    success: bool
    failure_mode: FailureMode | None = None


def _next(state: ControllerState, action: Action, **changes) -> tuple[Action, ControllerState]:
    return action, replace(state, last_action=action.kind, **changes)


def decide(state: ControllerState, measured_t: float | None) -> tuple[Action | Terminate, ControllerState]:
    """One step of the loading decision tree.

    ``measured_t`` is the mean transmission of the check that just ran and
    is ignored when the previous step was not a check. Every action other
    than depumping is followed by a check; depumping is always followed by
    weak repumping, and only the check after a push-out uses the repumper.
    """
    t_low, t_high = state.window
    last = state.last_action
    if state.phase is Phase.DONE:
        raise ValueError("trial already terminated")

    if last is ActionKind.DEPUMPING:
        return _next(state, Action(ActionKind.WEAK_REPUMPING))
    if last in (ActionKind.OPTICAL_PUMPING, ActionKind.WEAK_REPUMPING):
        return _next(state, Action.check())
    if last is ActionKind.PUSH_OUT:
        return _next(state, Action.check(with_repumper=True))

    if state.phase is Phase.INIT:
        return _next(state, Action(ActionKind.OPTICAL_PUMPING), phase=Phase.PUMPING)

    if measured_t is None or not math.isfinite(measured_t):
        raise ValueError("a check result is required here")
    done = replace(state, phase=Phase.DONE)

    if state.phase is Phase.PUMPING:
        if measured_t >= t_low:
            return Terminate(False, FailureMode.REJECTED), done
        return _next(state, Action(ActionKind.DEPUMPING), phase=Phase.CYCLING)

    if state.phase is Phase.POST_PUSH:
        if t_low <= measured_t <= t_high:
            return Terminate(True), done
        if measured_t > t_high:
            return Terminate(False, FailureMode.ATOM_LOSS), done
        return _next(state, Action(ActionKind.DEPUMPING), phase=Phase.CYCLING)

    # Cycling: one decision per iteration
    if state.iteration >= state.max_iterations:
        return Terminate(False, FailureMode.ITERATION_LIMIT), done
    it = state.iteration + 1
    if t_low <= measured_t <= t_high:
        return _next(state, Action(ActionKind.PUSH_OUT), phase=Phase.POST_PUSH, iteration=it)
    if measured_t > t_high:
        return _next(state, Action(ActionKind.WEAK_REPUMPING), iteration=it)
    return _next(state, Action(ActionKind.DEPUMPING), iteration=it)


@dataclass(frozen=True)
class ActionLogEntry:
    t_us: int
    label: str
    duration_us: int
    measured_t: float | None = None
    phase: str = ""

    def as_dict(self) -> dict:
        d = {"t_us": self.t_us, "action": self.label, "duration_us": self.duration_us,
             "phase": self.phase}
        if self.measured_t is not None:
            d["measured_t"] = self.measured_t
        return d


@dataclass(frozen=True)
class TrialRecord:
    success: bool
    n_initial: int
    iterations_used: int
    wall_time_ms: float
    failure_mode: FailureMode | None = None
    n_final: int = 0
    initial_t: float | None = None
    final_t: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.success == (self.failure_mode is not None):
            raise ValueError("failure_mode must be set iff success is false")

    @property
    def accepted(self) -> bool:
        return self.failure_mode is not FailureMode.REJECTED

    def as_dict(self) -> dict:
        d = asdict(self)
        d["failure_mode"] = None if self.failure_mode is None else self.failure_mode.value
        return d


@dataclass
class TrialResult:
    record: TrialRecord
    trace: Trace
    actions: list[ActionLogEntry]
    events: list[TruthEvent]


def draw_loading(ctrl: ControllerConfig, rng: np.random.Generator) -> list[int]:
    if ctrl.mode == "multi-trap":
        return [int(v) for v in rng.random(ctrl.n_traps) < ctrl.p_load]
    return [min(int(rng.poisson(ctrl.load_mean)), MAX_ATOMS)]


def run_trial(n_initial: int | Sequence[int] | None, cfg: CavityConfig, params: SimParams,
              ctrl: ControllerConfig, seed: int) -> TrialResult:
    """Alternate simulator actions and decisions until the controller terminates.

    ``cfg`` and ``params`` are used as given (see ``ControllerConfig.cavity``
    and ``.sim_params`` for the protocol operating point). ``n_initial`` may
    be a per-trap list, a single-trap count, or ``None`` to draw the loading.
    """
    params.validate(cfg)
    streams = SimStreams(seed)
    if n_initial is None:
        loading = draw_loading(ctrl, streams.loading)
    elif isinstance(n_initial, (int, np.integer)):
        loading = [int(n_initial)]
    else:
        loading = [int(n) for n in n_initial]
    ens = TrapEnsemble.load(loading, params)
    loss = 1.0 / ctrl.loss_tau_ms

    state = ControllerState.initial(single_atom_window(cfg), ctrl.max_iterations)
    pieces, log = [], []
    measured = initial_t = None
    wall_us = 0
    while True:
        decision, state = decide(state, measured)
        if isinstance(decision, Terminate):
            break
        t_us = ens.time_us(params)
        piece = apply_action(ens, decision, cfg, params, streams, loss_per_ms=loss)
        wall_us += decision.duration_us
        measured = None
        if decision.kind is ActionKind.ATOM_CHECK:
            measured = float(piece.t_est.mean())
            pieces.append(piece)
            if initial_t is None:
                initial_t = measured
        elif len(piece):
            pieces.append(piece)
        log.append(ActionLogEntry(t_us, decision.label, decision.duration_us, measured,
                                  state.phase.value))

    final_t = measured
    # judged when the controller stops; the settle below only feeds the final histogram
    n_final = ens.n_present
    if ctrl.settle_ms > 0 and decision.failure_mode is not FailureMode.REJECTED:
        # let hot survivors recool, then take one more repumped look for the final histogram
        settle = Action(ActionKind.ATOM_CHECK, int(round(ctrl.settle_ms * 1000)))
        pieces.append(apply_action(ens, settle, cfg, params, streams, loss_per_ms=loss))
        last = apply_action(ens, Action.check(with_repumper=True), cfg, params, streams,
                            loss_per_ms=loss)
        pieces.append(last)
        final_t = float(last.t_est.mean())

    mode = decision.failure_mode
    success = decision.success
    if success and n_final != 1:
        success = False
        mode = FailureMode.EJECTION_ERROR if n_final > 1 else FailureMode.ATOM_LOSS
    record = TrialRecord(success, sum(loading), state.iteration, wall_us / 1000.0, mode,
                         n_final, initial_t, final_t, int(seed))
    trace = Trace.concat(pieces, {"seed": int(seed), "loading": loading}) if pieces else Trace.empty(cfg)
    return TrialResult(record, trace, log, ens.events)


def trial_seed(seed: int, index: int) -> int:
    """Per-trial seed: first 63 bits of SeedSequence([seed, index])."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))


@dataclass
class CampaignReport:
    mode: str
    p_eject: float
    n_shots: int
    n_accepted: int
    n_success: int
    success_rate: float
    success_stderr: float
    mean_time_to_success_ms: float
    failure_modes: dict
    iterations_hist: list[int]
    hist_edges: list[float]
    initial_hist: list[int]
    final_hist: list[int]
    empty: bool = False
    records: list[TrialRecord] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "records"}
        return d


def _run_chunk(args) -> list[TrialResult]:
    indices, seed, n_initial, cfg, params, ctrl, keep = args
    out = []
    for i in indices:
        res = run_trial(n_initial, cfg, params, ctrl, trial_seed(seed, i))
        if not keep:
            res = TrialResult(res.record, Trace.empty(cfg), res.actions, [])
        out.append(res)
    return out


def run_shots(indices: Sequence[int], seed: int, cfg: CavityConfig, params: SimParams,
              ctrl: ControllerConfig, n_initial=None, workers: int = 1,
              keep_traces: bool = False) -> list[TrialResult]:
    """Trials for the given counter indices, returned in index order."""
    indices = list(indices)
    if workers <= 1 or len(indices) < 2 * workers:
        return _run_chunk((indices, seed, n_initial, cfg, params, ctrl, keep_traces))
    chunks = [indices[k::workers] for k in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_run_chunk, [(c, seed, n_initial, cfg, params, ctrl, keep_traces)
                                           for c in chunks]))
    by_index = {i: r for c, part in zip(chunks, parts) for i, r in zip(c, part)}
    return [by_index[i] for i in indices]


def campaign(trials: int, cfg: CavityConfig, params: SimParams, ctrl: ControllerConfig, seed: int,
             n_initial=None, workers: int = 1, max_shots: int | None = None,
             keep_traces: bool = False) -> tuple[CampaignReport, list[TrialResult]]:
    """Run shots until ``trials`` of them pass postselection (or ``max_shots`` is hit).

    Shot ``i`` uses ``trial_seed(seed, i)``, so the result does not depend
    on ``workers``. Returns the report and every shot, rejected ones included.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cap = max_shots if max_shots is not None else max(10 * trials, 100)
    results: list[TrialResult] = []
    accepted = 0
    while accepted < trials and len(results) < cap:
        need = trials - accepted
        batch = min(cap - len(results), max(need + need // 2 + 4, 8))
        start = len(results)
        new = run_shots(range(start, start + batch), seed, cfg, params, ctrl, n_initial,
                        workers, keep_traces)
        for r in new:
            if accepted >= trials:
                break
            results.append(r)
            accepted += r.record.accepted or not ctrl.postselect
    return summarize(results, ctrl, params), results


def summarize(results: Sequence[TrialResult], ctrl: ControllerConfig, params: SimParams,
              hist_width: float = 0.02) -> CampaignReport:
    recs = [r.record for r in results]
    kept = [r for r in recs if r.accepted or not ctrl.postselect]
    n = len(kept)
    wins = [r for r in kept if r.success]
    rate = len(wins) / n if n else float("nan")
    stderr = math.sqrt(rate * (1 - rate) / n) if n else float("nan")
    t_success = float(np.mean([r.wall_time_ms for r in wins])) if wins else float("nan")
    modes = {m.value: sum(r.failure_mode is m for r in kept) for m in FailureMode
             if m is not FailureMode.REJECTED}
    modes["Rejected"] = len(recs) - n
    edges = np.arange(0.0, 1.3 + hist_width / 2, hist_width)
    init = np.histogram([r.initial_t for r in recs if r.initial_t is not None], bins=edges)[0]
    final = np.histogram([r.final_t for r in kept if r.final_t is not None], bins=edges)[0]
    iters = np.bincount([r.iterations_used for r in kept], minlength=1) if kept else np.zeros(1, int)
    return CampaignReport(
        mode=ctrl.mode, p_eject=params.p_eject, n_shots=len(recs), n_accepted=n,
        n_success=len(wins), success_rate=rate, success_stderr=stderr,
        mean_time_to_success_ms=t_success, failure_modes=modes,
        iterations_hist=iters.tolist(), hist_edges=edges.tolist(),
        initial_hist=init.tolist(), final_hist=final.tolist(), empty=n == 0, records=recs,
    )

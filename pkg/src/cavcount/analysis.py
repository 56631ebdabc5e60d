"""Level calibration, occupancy classification and event detection on photon-count traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import brentq, curve_fit
from scipy.signal import find_peaks

from .cavity import CavityConfig, effective_atoms, transmission
from .dynamics import EventKind, Trace, TruthEvent


MAX_N_EFF = 16.0


class TooFewPeaks(ValueError):
    pass


class InsufficientTrials(ValueError):
    pass


@dataclass(frozen=True)
class Level:
    n_atoms: int
    t_level: float
    extrapolated: bool = False


@dataclass(frozen=True)
class LevelCalibration:
    levels: tuple[Level, ...]
    thresholds: tuple[float, ...]
    # operating point used to convert a transmission into coupled atoms
    x: float = 0.0
    y: float = 0.0
    eta: float = 21.0

    @property
    def t_levels(self) -> np.ndarray:
        return np.array([lv.t_level for lv in self.levels])

    @property
    def n_atoms(self) -> np.ndarray:
        return np.array([lv.n_atoms for lv in self.levels])

    def classify(self, t) -> np.ndarray:
        """Nearest level; identical to the midpoint thresholds."""
        t = np.asarray(t, dtype=float)
        # thresholds decrease with n, so count how many lie above t
        idx = np.sum(t[..., None] < np.asarray(self.thresholds), axis=-1)
        return self.n_atoms[idx]

    def n_eff(self, t):
        return effective_atoms(t, self.x, self.y, self.eta)

    def as_dict(self) -> dict:
        return {
            "levels": [{"n_atoms": lv.n_atoms, "t_level": lv.t_level,
                        "extrapolated": lv.extrapolated} for lv in self.levels],
            "thresholds": list(self.thresholds),
            "x": self.x, "y": self.y, "eta": self.eta,
        }

    @classmethod
    def from_model(cls, cfg: CavityConfig, n_max: int = 3) -> "LevelCalibration":
        """Levels straight from the transmission model, every one flagged extrapolated."""
        levels = tuple(Level(n, float(cfg.level(n)), True) for n in range(n_max + 1))
        return cls(levels, _midpoints(levels), cfg.x, cfg.y, cfg.eta)


def _midpoints(levels) -> tuple[float, ...]:
    t = [lv.t_level for lv in levels]
    return tuple(0.5 * (a + b) for a, b in zip(t[:-1], t[1:]))


def _as_traces(source) -> list[Trace]:
    return [source] if isinstance(source, Trace) else list(source)


def transmission_histogram(source, width: float = 0.01, t_max: float | None = None):
    """Histogram of per-bin transmission estimates; returns (edges, counts)."""
    t = np.concatenate([tr.t_est for tr in _as_traces(source)])
    top = max(1.2, float(t.max()) + width) if t_max is None else t_max
    edges = np.arange(0.0, top + width, width)
    counts, edges = np.histogram(t, bins=edges)
    return edges, counts


def calibrate_levels(source, cfg: CavityConfig, n_max: int = 3,
                     width: float = 0.01) -> LevelCalibration:
    """Locate occupancy peaks in the transmission histogram.

    Peaks are numbered 0, 1, 2, ... from the highest transmission down.
    Levels that do not show up as peaks are filled in from the model with
    ``cfg.eta`` and flagged ``extrapolated``.
    """
    if not 1 <= n_max <= 4:
        raise ValueError("n_max must be between 1 and 4")
    t_all = np.concatenate([tr.t_est for tr in _as_traces(source)])
    edges, counts = transmission_histogram(source, width)
    centers = 0.5 * (edges[1:] + edges[:-1])

    predicted = np.array([cfg.level(n) for n in range(n_max + 1)])
    min_sep = 0.5 * float(np.min(-np.diff(predicted)))
    smooth = gaussian_filter1d(counts.astype(float), 1.0)
    peaks, _ = find_peaks(smooth, distance=max(1, int(min_sep / width)),
                          prominence=0.02 * smooth.max())
    if len(peaks) < 2:
        raise TooFewPeaks(f"found {len(peaks)} histogram peak(s), need at least 2")
    peaks = peaks[np.argsort(smooth[peaks])[::-1][: n_max + 1]]
    peaks = np.sort(peaks)[::-1]

    levels = []
    for n, pk in enumerate(peaks):
        near = np.abs(t_all - centers[pk]) <= 0.5 * min_sep
        levels.append(Level(n, float(t_all[near].mean()), False))
    for n in range(len(peaks), n_max + 1):
        levels.append(Level(n, float(predicted[n]), True))
    levels = tuple(levels)
    return LevelCalibration(levels, _midpoints(levels), cfg.x, cfg.y, cfg.eta)


def sliding_mean(t: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average; the window shrinks at the edges."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return np.asarray(t, dtype=float)
    kernel = np.ones(window)
    num = np.convolve(t, kernel, mode="same")
    den = np.convolve(np.ones_like(t, dtype=float), kernel, mode="same")
    return num / den


def classify_bins(trace: Trace, cal: LevelCalibration, window_bins: int = 1) -> list[tuple[int, int]]:
    n_hat = cal.classify(sliding_mean(trace.t_est, window_bins))
    return [(int(t), int(n)) for t, n in zip(trace.t_start_us, n_hat)]


class DetectedKind(str, Enum):
    JUMP_UP = "JumpUp"
    JUMP_DOWN = "JumpDown"
    COLLISION = "Collision"
    RECOVERY_END = "RecoveryEnd"


@dataclass(frozen=True)
class DetectedEvent:
    t_us: int
    kind: DetectedKind
    delta_t: float
    recovered_coupling: float | None = None
    n_eff_before: float | None = None
    n_eff_after: float | None = None

    def as_dict(self) -> dict:
        d = {"t_us": self.t_us, "kind": self.kind.value, "delta_t": self.delta_t}
        if self.recovered_coupling is not None:
            d["recovered_coupling"] = self.recovered_coupling
        if self.n_eff_before is not None:
            d["n_eff_before"] = self.n_eff_before
            d["n_eff_after"] = self.n_eff_after
        return d


@dataclass(frozen=True)
class _Step:
    index: int        # boundary between bins index-1 and index
    t_us: float       # refined change time relative to the trace start
    before: float
    after: float


def _window_means(t: np.ndarray, window: int):
    n = len(t)
    cs = np.concatenate([[0.0], np.cumsum(t)])
    i = np.arange(1, n)
    nl = np.minimum(window, i)
    nr = np.minimum(window, n - i)
    m_left = (cs[i] - cs[i - nl]) / nl
    m_right = (cs[i + nr] - cs[i]) / nr
    return i, nl, nr, m_left, m_right


def _find_steps(t: np.ndarray, photons_per_bin: float, bin_us: int, noise_floor: float,
                window: int, z: float) -> list[_Step]:
    if len(t) < 2:
        return []
    i, nl, nr, m_left, m_right = _window_means(t, window)
    diff = m_right - m_left
    # shot-noise standard error of the difference of two window means
    se = np.sqrt(np.clip(m_left, 1e-3, None) / (nl * photons_per_bin)
                 + np.clip(m_right, 1e-3, None) / (nr * photons_per_bin))
    cand = np.flatnonzero((np.abs(diff) > noise_floor) & (np.abs(diff) > z * se))

    accepted: list[int] = []
    for k in cand[np.argsort(-np.abs(diff[cand]), kind="stable")]:
        if all(abs(k - a) >= window for a in accepted):
            accepted.append(int(k))

    steps = []
    for k in sorted(accepted):
        b, left, right = int(i[k]), int(nl[k]), int(nr[k])
        # the bins either side of the boundary may straddle the change
        before = t[b - left:b - 1].mean() if left >= 2 else t[b - 1]
        after = t[b + 1:b + right].mean() if right >= 2 else t[b]
        span = after - before
        if abs(span) <= noise_floor:
            continue
        sig_b = np.sqrt(max(before, 1e-3) / photons_per_bin)
        sig_a = np.sqrt(max(after, 1e-3) / photons_per_bin)
        f_prev = 0.0
        if left >= 2 and abs(t[b - 1] - before) > 2 * sig_b:
            f_prev = float(np.clip((t[b - 1] - before) / span, 0.0, 1.0))
        f_next = 1.0
        if right >= 2 and abs(t[b] - after) > 2 * sig_a:
            f_next = float(np.clip((t[b] - before) / span, 0.0, 1.0))
        t_change = (b + (1.0 - f_next) - f_prev) * bin_us
        steps.append(_Step(b, t_change, float(before), float(after)))
    return steps


def _plateau(seg: np.ndarray, photons_per_bin: float, p: int) -> int | None:
    """First offset where the mean over the next ``p`` bins stops falling by more than 1 SE."""
    if len(seg) < 2 * p:
        return None
    cs = np.concatenate([[0.0], np.cumsum(seg)])
    j = np.arange(0, len(seg) - 2 * p + 1)
    a = (cs[j + p] - cs[j]) / p
    b = (cs[j + 2 * p] - cs[j + p]) / p
    se = np.sqrt((np.clip(a, 1e-3, None) + np.clip(b, 1e-3, None)) / (p * photons_per_bin))
    flat = np.flatnonzero(a - b < se)
    return int(flat[0]) + p if len(flat) else None


def _recovery(t: np.ndarray, start: int, stop: int, cal: LevelCalibration,
              photons_per_bin: float, window: int, plateau_bins: int) -> tuple[float, int]:
    """Slow transmission decrease after a collision: (amount regained, end bin).

    The episode is fitted with coupling relaxing exponentially towards a
    final value, and the regained transmission is read off the fit from the
    collision instant to the plateau (or to the interruption).
    """
    seg = t[start + 1:stop]
    if len(seg) < 2:
        return 0.0, stop
    off = _plateau(seg, photons_per_bin, plateau_bins)
    end = stop if off is None else start + 1 + off
    fit_len = len(seg) if off is None else min(len(seg), off + 2 * plateau_bins)
    y = seg[:fit_len]
    tt = np.arange(1, fit_len + 1, dtype=float)  # bins since the step, bin centres ~ +0.5
    head = y[:window].mean()
    tail = y[-min(plateau_bins, len(y)):].mean()
    simple = float(head - tail)
    n_tail_bins = min(plateau_bins, len(y))
    se = np.sqrt(max(head, 1e-3) / (min(window, len(y)) * photons_per_bin)
                 + max(tail, 1e-3) / (n_tail_bins * photons_per_bin))
    # only model a recovery that is evident in the raw data
    if fit_len < 3 * window or simple < 3 * se:
        return simple, end

    def model(tb, n_inf, d, tau):
        return transmission(np.clip(n_inf - d * np.exp(-tb / tau), 0.0, None), cal.x, cal.y, cal.eta)

    n_head, n_tail = float(cal.n_eff(head)), float(cal.n_eff(tail))
    p0 = [max(n_tail, 1e-3), max(n_tail - n_head, 1e-3), max(fit_len / 4.0, window + 1.0)]
    sigma = np.sqrt(np.clip(y, 1e-3, None) / photons_per_bin)
    try:
        (n_inf, d, tau), _ = curve_fit(model, tt - 0.5, y, p0=p0, sigma=sigma,
                                       bounds=([0.0, 0.0, float(window)], [MAX_N_EFF, MAX_N_EFF, 10.0 * fit_len]))
    except (RuntimeError, ValueError):
        return simple, end
    t_stop = np.inf if off is not None else float(fit_len)
    regained = float(model(0.0, n_inf, d, tau) - model(t_stop, n_inf, d, tau))
    return regained, end


def detect_events(trace: Trace, cal: LevelCalibration, noise_floor: float = 0.07,
                  window: int = 5, z: float = 4.0, collision_atoms: float = 1.25,
                  plateau_ms: float = 2.0) -> list[DetectedEvent]:
    """Change points in transmission, labelled as jumps, collisions and recoveries.

    An upward step whose levels imply more than ``collision_atoms`` coupled
    atoms disappearing is a collision. Each collision opens a recovery
    episode that ends at a plateau or at the next upward step; downward
    steps inside it are part of the recovery, not jumps.
    """
    t = trace.t_est
    if len(t) == 0:
        return []
    ppb = trace.photons_per_bin_empty
    t0 = int(trace.t_start_us[0])
    steps = _find_steps(t, ppb, trace.bin_us, noise_floor, window, z)
    plateau_bins = max(1, int(round(plateau_ms * 1000.0 / trace.bin_us)))
    ups = [s for s in steps if s.after > s.before]

    out: list[DetectedEvent] = []
    recovery_until = -1
    for s in steps:
        delta = s.after - s.before
        n_before, n_after = float(cal.n_eff(s.before)), float(cal.n_eff(s.after))
        t_us = t0 + int(round(s.t_us))
        if delta < 0:
            if s.index < recovery_until:
                continue
            out.append(DetectedEvent(t_us, DetectedKind.JUMP_DOWN, delta, None, n_before, n_after))
            continue
        if n_before - n_after < collision_atoms:
            out.append(DetectedEvent(t_us, DetectedKind.JUMP_UP, delta, None, n_before, n_after))
            continue
        nxt = next((u.index for u in ups if u.index > s.index), len(t))
        regained, end = _recovery(t, s.index, nxt, cal, ppb, window, plateau_bins)
        recovery_until = end
        out.append(DetectedEvent(t_us, DetectedKind.COLLISION, delta, regained, n_before, n_after))
        if regained > noise_floor:
            t_end = t0 + min(end, len(t) - 1) * trace.bin_us
            out.append(DetectedEvent(t_end, DetectedKind.RECOVERY_END, -regained))
    out.sort(key=lambda e: e.t_us)
    return out


@dataclass
class TrialAnalysis:
    events: list[DetectedEvent]
    n_initial_hat: int
    duration_us: int
    truth: list[TruthEvent] | None = None

    @property
    def collisions(self) -> list[DetectedEvent]:
        return [e for e in self.events if e.kind is DetectedKind.COLLISION]


def analyze_trace(trace: Trace, cal: LevelCalibration, truth: list[TruthEvent] | None = None,
                  **kwargs) -> TrialAnalysis:
    """Detect events and estimate the starting occupancy from the first clean stretch."""
    events = detect_events(trace, cal, **kwargs)
    t = trace.t_est
    first = next((e for e in events if e.kind is not DetectedKind.RECOVERY_END), None)
    head = len(t) if first is None else max(1, (first.t_us - int(trace.t_start_us[0])) // trace.bin_us)
    head = min(head, max(1, 1000 // trace.bin_us), len(t))
    # invert the model rather than snapping to calibrated levels, which stop at n_max
    n0 = int(round(float(cal.n_eff(t[:head].mean())))) if head else 0
    return TrialAnalysis(events, n0, len(t) * trace.bin_us, truth)


@dataclass
class CollisionReport:
    n_trials: int
    n_collisions: int
    time_edges_us: list[float]
    time_counts: list[int]
    fast_fraction: float
    slow_tau_fit_ms: float
    slow_tau_stderr_ms: float
    tail_tau_all_ms: float
    collisions_per_trial_mean: float
    collisions_per_trial_hist: list[int]
    recovery_edges: list[float]
    recovery_counts: list[int]
    recovery_fraction: float
    outcome_fractions: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _truncated_exp_tau(excess: np.ndarray, limits: np.ndarray) -> float:
    """MLE timescale of exponential waits each observed below its own right cut."""
    if len(excess) == 0:
        return float("nan")

    def score(tau):
        w = np.exp(-limits / tau)
        return np.sum(excess) / tau**2 - len(excess) / tau + np.sum(limits * w / (tau**2 * (1 - w)))

    lo, hi = 1e-3, 1e4
    if score(lo) * score(hi) > 0:
        return float(np.mean(excess))
    return float(brentq(score, lo, hi))


def collision_statistics(trials: Sequence[TrialAnalysis], noise_floor: float = 0.07,
                         fast_window_us: float = 100.0, tail_start_ms: float = 1.0,
                         hist_bin_us: float = 100.0, min_trials: int = 100) -> CollisionReport:
    """Aggregate detected collisions over trials that each start at load time t = 0.

    ``slow_tau_fit_ms`` is the per-pair exponential timescale of the first
    collision after ``tail_start_ms``: events over pair-weighted exposure,
    with the pair count taken from the starting occupancy and
    single-atom losses treated as censoring.
    """
    if len(trials) < min_trials:
        raise InsufficientTrials(f"{len(trials)} trials < required {min_trials}")
    times = np.array([e.t_us for tr in trials for e in tr.collisions], dtype=float)
    regained = np.array([e.recovered_coupling for tr in trials for e in tr.collisions], dtype=float)
    duration = max(tr.duration_us for tr in trials)

    edges = np.arange(0.0, duration + hist_bin_us, hist_bin_us)
    counts, _ = np.histogram(times, bins=edges)
    n_coll = len(times)
    fast = float(np.mean(times <= fast_window_us)) if n_coll else float("nan")

    tail_us = tail_start_ms * 1000.0
    events = 0
    exposure = 0.0
    for tr in trials:
        if tr.n_initial_hat < 2:
            continue
        first_up = next((e for e in tr.events
                         if e.kind in (DetectedKind.COLLISION, DetectedKind.JUMP_UP)), None)
        if first_up is not None and first_up.t_us <= tail_us:
            continue
        stop = tr.duration_us if first_up is None else first_up.t_us
        pairs = tr.n_initial_hat * (tr.n_initial_hat - 1) / 2
        exposure += pairs * (stop - tail_us) / 1000.0
        events += first_up is not None and first_up.kind is DetectedKind.COLLISION
    tau = exposure / events if events else float("nan")

    late = times > tail_us
    tau_all = _truncated_exp_tau((times[late] - tail_us) / 1000.0,
                                 np.full(int(late.sum()), (duration - tail_us) / 1000.0))

    # cycles that visibly start with one atom or none never need a collision
    per_trial = np.array([len(tr.collisions) for tr in trials if tr.n_initial_hat >= 2], dtype=int)
    if len(per_trial) == 0:
        per_trial = np.zeros(1, dtype=int)
    rec_edges = np.arange(0.0, 1.0 + 0.01, 0.01)
    kept = regained[regained > noise_floor]
    rec_counts, _ = np.histogram(kept, bins=rec_edges)

    outcomes: dict = {"recovered": float(np.mean(regained > noise_floor)) if n_coll else float("nan")}
    truth = [e for tr in trials if tr.truth for e in tr.truth if e.kind is EventKind.COLLISION]
    if truth:
        names = [e.outcome for e in truth]
        for name in ("both_lost", "one_lost", "both_heated"):
            outcomes[f"truth_{name}"] = names.count(name) / len(names)
        outcomes["truth_collisions"] = len(names)

    return CollisionReport(
        n_trials=len(trials),
        n_collisions=n_coll,
        time_edges_us=edges.tolist(),
        time_counts=counts.tolist(),
        fast_fraction=fast,
        slow_tau_fit_ms=float(tau),
        slow_tau_stderr_ms=float(tau / np.sqrt(events)) if events else float("nan"),
        tail_tau_all_ms=float(tau_all),
        collisions_per_trial_mean=float(per_trial.mean()),
        collisions_per_trial_hist=np.bincount(per_trial).tolist(),
        recovery_edges=rec_edges.tolist(),
        recovery_counts=rec_counts.tolist(),
        recovery_fraction=outcomes["recovered"],
        outcome_fractions=outcomes,
    )

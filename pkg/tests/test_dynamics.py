import numpy as np
import pytest
from scipy import stats

from cavcount.actions import Action, ActionKind
from cavcount.cavity import CavityConfig
from cavcount.dynamics import (EventKind, Light, Manifold, SimParams, SimStreams, TrapEnsemble,
                               apply_action, evolve, pair_survival, simulate, simulate_multi_trap)

NO_LOSS = dict(loss_tau_ms_cooling=1e12, loss_tau_ms_heating=1e12)
LOSSES = {"both_lost": 2, "one_lost": 1, "both_heated": 0}


def test_deterministic_for_fixed_seed():
    cfg, p = CavityConfig(), SimParams()
    a = simulate(4, cfg, p, 30.0, seed=11)
    b = simulate(4, cfg, p, 30.0, seed=11)
    c = simulate(4, cfg, p, 30.0, seed=12)
    assert np.array_equal(a[0].photons, b[0].photons)
    assert a[1] == b[1]
    assert not np.array_equal(a[0].photons, c[0].photons)


def test_empty_trap_is_pure_shot_noise():
    cfg = CavityConfig()
    trace, events = simulate(0, cfg, SimParams(), 10.0, seed=3)
    assert events == []
    assert len(trace) == 100
    assert np.all(trace.t_start_us == 100 * np.arange(100))
    assert trace.t_est.mean() == pytest.approx(1.0, abs=4 * np.sqrt(1000 / 100) / 1000)


@pytest.mark.parametrize("n_per_trap", [[0], [1, 1]])
def test_photon_counts_are_poisson(n_per_trap):
    cfg = CavityConfig()
    p = SimParams(initial_coupling=1.0, **NO_LOSS)
    trace, events = simulate_multi_trap(n_per_trap, cfg, p, 10_000.0, seed=5)
    assert len(trace) == 100_000 and events == []
    mu = cfg.photons_per_bin_empty * cfg.level(sum(n_per_trap))
    counts = trace.photons
    lo, hi = int(stats.poisson.ppf(1e-3, mu)), int(stats.poisson.ppf(1 - 1e-3, mu))
    ks = np.arange(lo, hi + 1)
    # interior cells plus one cell for each tail
    obs = np.concatenate([[np.sum(counts < lo)], [np.sum(counts == k) for k in ks],
                          [np.sum(counts > hi)]])
    exp = len(counts) * np.concatenate([[stats.poisson.cdf(lo - 1, mu)], stats.poisson.pmf(ks, mu),
                                        [stats.poisson.sf(hi, mu)]])
    assert exp.min() >= 5
    assert stats.chisquare(obs, exp, ddof=0).pvalue > 0.01


def test_single_atom_ramp_and_level():
    cfg = CavityConfig()
    trace, _ = simulate(1, cfg, SimParams(**NO_LOSS), 20.0, seed=2)
    t = trace.t_est
    sigma = np.sqrt(cfg.level(1) / cfg.photons_per_bin_empty) / np.sqrt(50)
    assert t[-50:].mean() == pytest.approx(0.7782, abs=3 * sigma)
    assert t[:10].mean() > t[-50:].mean()


def _first_collisions(n_runs, p):
    times, outcomes = [], []
    for s in range(n_runs):
        ens = TrapEnsemble.load([2], p)
        evolve(ens, 10_000, Light(True), p, SimStreams(s))
        first = next(e for e in ens.events if e.kind is EventKind.COLLISION)
        times.append(first.t_us)
        outcomes.append(first.outcome)
    return np.array(times), outcomes


@pytest.fixture(scope="module")
def pinned_pair():
    p = SimParams(initial_coupling=1.0, **NO_LOSS)
    return p, *_first_collisions(10_000, p)


def test_collision_times_follow_mixture(pinned_pair):
    p, times, _ = pinned_pair
    k = times // p.tick_us

    def cdf(ticks):
        return 1.0 - pair_survival(ticks * p.tick_ms, p)

    # randomized PIT: exactly uniform for an integer-valued law
    v = np.random.default_rng(0).random(len(k))
    u = cdf(k - 1) + v * (cdf(k) - cdf(k - 1))
    assert stats.kstest(u, "uniform").pvalue > 0.01
    assert np.mean(times <= 3 * p.collision_fast_tau_us) == pytest.approx(
        p.collision_fast_fraction, abs=0.02)


def test_collision_outcome_frequencies(pinned_pair):
    p, _, outcomes = pinned_pair
    obs = [outcomes.count(k) for k in ("both_lost", "one_lost", "both_heated")]
    exp = np.array([p.p_both_lost, p.p_one_lost, p.p_both_heated]) * len(outcomes)
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_bookkeeping_consistent():
    cfg = CavityConfig(delta_ca_hz=-58e6)
    for seed in range(20):
        _, events = simulate(6, cfg, SimParams(), 40.0, seed=seed)
        present = 6
        last = 0
        for e in events:
            assert e.t_us >= last
            last = e.t_us
            assert e.atoms_before == present
            if e.kind is EventKind.COLLISION:
                lost = LOSSES[e.outcome]
            elif e.kind is EventKind.BACKGROUND_LOSS:
                lost = 1
            else:
                lost = 0
            assert e.atoms_after == e.atoms_before - lost
            present = e.atoms_after
        assert present >= 0


def test_one_occupied_trap_matches_single_trap_run():
    cfg, p = CavityConfig(), SimParams()
    a, ea = simulate(1, cfg, p, 20.0, seed=9)
    b, eb = simulate_multi_trap([1, 0, 0, 0], cfg, p, 20.0, seed=9)
    assert np.array_equal(a.photons, b.photons)
    assert [e.as_dict() for e in ea] == [e.as_dict() for e in eb]


def test_separate_traps_never_collide():
    cfg, p = CavityConfig(), SimParams(**NO_LOSS)
    for seed in range(10):
        _, events = simulate_multi_trap([1, 1, 1, 1], cfg, p, 200.0, seed=seed)
        assert not any(e.kind is EventKind.COLLISION for e in events)


def test_unpaired_atom_ignores_collision_settings():
    cfg = CavityConfig()
    a, _ = simulate(1, cfg, SimParams(), 20.0, seed=4)
    b, _ = simulate(1, cfg, SimParams(collision_slow_tau_ms=1.0), 20.0, seed=4)
    assert np.array_equal(a.photons, b.photons)


def test_sim_params_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        SimParams(p_both_lost=0.6).validate()
    assert SimParams(tick_us=30).problems(CavityConfig()) == [
        "tick_us (30) must divide bin_us (100)"]
    assert SimParams().problems(CavityConfig()) == []


def _ensemble(n_f3, n_f4, p):
    atoms = TrapEnsemble.load([n_f3], p, manifold=Manifold.F3).atoms + TrapEnsemble.load([n_f4], p).atoms
    return TrapEnsemble(atoms)


def test_push_out_ideal():
    cfg, p = CavityConfig(), SimParams(p_eject=1.0)
    ens = _ensemble(2, 1, p)
    trace = apply_action(ens, Action(ActionKind.PUSH_OUT), cfg, p, SimStreams(0), loss_per_ms=0.0)
    assert len(trace) == 0
    assert ens.count(Manifold.F4) == 1 and ens.n_present == 1
    assert [e.kind for e in ens.events] == [EventKind.PUSH_EJECT] * 2


def test_push_out_fraction():
    cfg, p = CavityConfig(), SimParams(p_eject=0.63)
    ejected = 0
    for s in range(1000):
        ens = _ensemble(10, 0, p)
        apply_action(ens, Action(ActionKind.PUSH_OUT), cfg, p, SimStreams(s), loss_per_ms=0.0)
        ejected += 10 - ens.n_present
    assert ejected / 10_000 == pytest.approx(0.63, abs=0.01)


def test_push_failures_split_by_leak():
    cfg, p = CavityConfig(), SimParams(p_eject=0.0, p_leak=0.78)
    leaks = 0
    for s in range(500):
        ens = _ensemble(10, 0, p)
        apply_action(ens, Action(ActionKind.PUSH_OUT), cfg, p, SimStreams(s), loss_per_ms=0.0)
        leaks += sum(e.kind is EventKind.PUSH_LEAK for e in ens.events)
        hot = [a for a in ens.atoms if a.manifold is Manifold.F3]
        assert all(a.heated and a.coupling <= p.push_fail_coupling for a in hot)
    assert leaks / 5000 == pytest.approx(0.78, abs=0.02)


def test_depumping_transfer():
    cfg, p = CavityConfig(), SimParams()
    assert 1 - np.exp(-p.depump_rate_per_ms * 0.5) == pytest.approx(0.99995, abs=1e-5)
    left = 0
    for s in range(1000):
        ens = TrapEnsemble.load([16], p)
        apply_action(ens, Action(ActionKind.DEPUMPING), cfg, p, SimStreams(s), loss_per_ms=0.0)
        left += ens.count(Manifold.F4)
    # expected 16000 * exp(-10) = 0.73 atoms left behind
    assert left <= 5


def test_probe_actions_emit_bins():
    cfg, p = CavityConfig(delta_ca_hz=-58e6), SimParams()
    ens = TrapEnsemble.load([1], p, manifold=Manifold.F3)
    s = SimStreams(1)
    assert len(apply_action(ens, Action(ActionKind.OPTICAL_PUMPING), cfg, p, s, 0.0)) == 50
    check = apply_action(ens, Action.check(), cfg, p, s, 0.0)
    assert len(check) == 10 and ens.count(Manifold.F3) == 1
    apply_action(ens, Action.check(with_repumper=True), cfg, p, s, 0.0)
    assert ens.count(Manifold.F4) == 1
    with pytest.raises(TypeError):
        apply_action(ens, "PushOut", cfg, p, s)


def test_action_rules():
    assert Action(ActionKind.WEAK_REPUMPING).duration_us == 1000
    assert Action.check(True).label == "AtomCheck+R"
    with pytest.raises(ValueError):
        Action(ActionKind.PUSH_OUT, with_repumper=True)
    with pytest.raises(ValueError):
        Action(ActionKind.PUSH_OUT, duration_us=-5)

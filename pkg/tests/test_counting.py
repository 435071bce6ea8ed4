"""Counting-mode trajectories: exact alternation engine and linear-filter replay."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

import helpers
from contmeas import (
    ConfigError,
    CountRealization,
    TimeGrid,
    jump_apply,
    linear_counting_evolve,
    master_evolve,
    no_jump_propagate,
    nonlinear_counting_step,
    observed_rates,
    pure_counting_step,
    sample_jump,
    simulate_counting_trajectory,
    twolevel_model,
)
from contmeas.oracles import TwoLevelFilterState, TwoLevelParams, pure_decay_epd, twolevel_filter_evolve


def _mixed_start():
    rho0 = np.array([[0.6, 0.2 + 0.1j], [0.2 - 0.1j, 0.4]], dtype=complex)
    s0 = TwoLevelFilterState(pi0=0.4, pi1=0.6, zeta=0.4 + 0.2j)
    return rho0, s0


# ---------------------------------------------------------------------------
# engine vs. closed-form filter on identical count records
# ---------------------------------------------------------------------------

def test_engine_matches_closed_form_filter_pumped():
    omega, lam_plus, lam_minus, lam_one = 1.0, 0.5, 0.3, 1.0
    m = twolevel_model(omega, lam_plus, lam_minus, lam_one, TimeGrid(0.0, 4.0, 80))
    p = TwoLevelParams(omega=omega, lam_plus=lam_plus, lam_minus=lam_minus, lam_one=lam_one)
    rho0, s0 = _mixed_start()

    seen_events = 0
    for seed in range(10):
        rec = simulate_counting_trajectory(
            m, rho0, rng=helpers.rng_for(101, seed), tau=1.0 / lam_one
        )
        seen_events += len(rec.realization.events)
        oracle = twolevel_filter_evolve(p, s0, rec.realization, m.grid)
        states = np.stack([s.as_matrix() for s in oracle])
        cs = np.array([s.c for s in oracle])
        np.testing.assert_allclose(rec.snapshots, states, atol=1e-8)
        np.testing.assert_allclose(rec.c_values, cs / s0.c, rtol=1e-8)
    assert seen_events >= 5  # the comparison actually exercised jumps


def test_engine_matches_closed_form_filter_pure_decay():
    m = helpers.pure_decay_model(lam_minus=0.3, lam_one=2.0, horizon=2.0, steps=40)
    p = TwoLevelParams(omega=0.0, lam_plus=0.0, lam_minus=0.3, lam_one=2.0)
    rec = simulate_counting_trajectory(
        m, helpers.excited(), rng=helpers.rng_for(7), tau=0.5
    )
    oracle = twolevel_filter_evolve(
        p, TwoLevelFilterState(pi0=0.0, pi1=1.0), rec.realization, m.grid
    )
    np.testing.assert_allclose(
        rec.snapshots, np.stack([s.as_matrix() for s in oracle]), atol=1e-9
    )
    np.testing.assert_allclose(rec.c_values, [s.c for s in oracle], rtol=1e-9)


# ---------------------------------------------------------------------------
# linear replay: engine equivalence and reference-weight invariance
# ---------------------------------------------------------------------------

def test_linear_replay_reproduces_engine_states():
    m = helpers.pumped_twolevel_model(horizon=3.0, steps=60)
    rho0, _ = _mixed_start()
    rec = simulate_counting_trajectory(m, rho0, rng=helpers.rng_for(55), tau=1.0)
    phis, c = linear_counting_evolve(m, rho0, rec.realization, tau=1.0)
    np.testing.assert_allclose(phis / c[:, None, None], rec.snapshots, atol=1e-10)
    np.testing.assert_allclose(c, rec.c_values, rtol=1e-10)


def test_linear_replay_tau_invariance():
    m = helpers.pumped_twolevel_model(horizon=3.0, steps=30)
    rho0, _ = _mixed_start()
    rec = simulate_counting_trajectory(m, rho0, rng=helpers.rng_for(56))
    n_ev = len(rec.realization.events)
    assert n_ev >= 1
    phis_a, c_a = linear_counting_evolve(m, rho0, rec.realization, tau=1.0)
    phis_b, c_b = linear_counting_evolve(m, rho0, rec.realization, tau=1000.0)
    np.testing.assert_allclose(
        phis_a / c_a[:, None, None], phis_b / c_b[:, None, None], atol=1e-9
    )
    # c rescales by tau^{m(t)} with m(t) counts so far
    events_t = np.array([t for t, _ in rec.realization.events])
    m_t = np.searchsorted(events_t, m.grid.times, side="right")
    np.testing.assert_allclose(c_b, c_a * 1000.0 ** m_t, rtol=1e-9)


def test_linear_replay_rejects_impossible_record():
    # a second count from the ground state has zero weight under pure decay
    m = helpers.pure_decay_model(horizon=1.0, steps=10)
    bad = CountRealization(events=((0.2, 0), (0.7, 0)), horizon=1.0)
    from contmeas import ContractViolationError

    with pytest.raises(ContractViolationError):
        linear_counting_evolve(m, helpers.excited(), bad)


# ---------------------------------------------------------------------------
# exclusive probability densities (pure decay)
# ---------------------------------------------------------------------------

def test_survival_matches_no_count_weight():
    # engine weight on a no-count record equals the closed-form survival
    m = helpers.pure_decay_model(lam_one=2.0, horizon=1.0, steps=20)
    _, c = linear_counting_evolve(
        m, helpers.excited(), CountRealization(events=(), horizon=1.0)
    )
    np.testing.assert_allclose(c, np.exp(-2.0 * m.grid.times), rtol=1e-10)
    assert (np.diff(c) <= 1e-12).all()

    mixed = np.diag([0.5, 0.5]).astype(complex)
    _, c2 = linear_counting_evolve(m, mixed, CountRealization(events=(), horizon=1.0))
    assert abs(c2[-1] - (1.0 + math.exp(-2.0)) / 2.0) < 1e-10


def test_one_count_density_matches_engine_weight():
    lam_minus, lam_one = 0.3, 1.0
    m = helpers.pure_decay_model(lam_minus=lam_minus, lam_one=lam_one, horizon=1.0, steps=10)
    p = TwoLevelParams(omega=0.0, lam_plus=0.0, lam_minus=lam_minus, lam_one=lam_one)
    t1 = 0.37
    _, c = linear_counting_evolve(
        m, helpers.excited(), CountRealization(events=((t1, 0),), horizon=1.0)
    )
    dens = pure_decay_epd(p, 1.0, 1.0, t1=t1)
    assert abs(dens - lam_one * math.exp(-(lam_minus + lam_one) * t1)) < 1e-14
    assert abs(c[-1] - dens) < 1e-10  # tau = 1 replay weight is the density itself


def test_epd_normalization_identity():
    p = TwoLevelParams(omega=0.0, lam_plus=0.0, lam_minus=0.3, lam_one=1.0)
    for t in (0.1, 0.5, 1.0, 3.0, 10.0):
        integral, err = quad(lambda t1: pure_decay_epd(p, 0.8, t, t1=t1), 0.0, t)
        total = pure_decay_epd(p, 0.8, t) + integral
        assert abs(total - 1.0) < 1e-9 + 10 * err
    assert pure_decay_epd(p, 0.8, 1.0, m=2) == 0.0
    assert pure_decay_epd(p, 0.8, 1.0, m=7) == 0.0


# ---------------------------------------------------------------------------
# sampled statistics
# ---------------------------------------------------------------------------

def test_pure_decay_statistics():
    m = helpers.pure_decay_model(lam_one=2.0, horizon=1.0, steps=10)
    n = 2000
    zero = 0
    for i in range(n):
        rec = simulate_counting_trajectory(
            m, helpers.excited(), rng=helpers.rng_for(2024, i), snapshot_stride=0
        )
        k = len(rec.realization.events)
        assert k <= 1  # at most one emission ever
        zero += k == 0
    p0 = math.exp(-2.0)
    stderr = math.sqrt(p0 * (1 - p0) / n)
    assert abs(zero / n - p0) < 4 * stderr


def test_pumped_stationary_count_rate():
    lam_plus, lam_minus, lam_one = 0.5, 0.3, 1.0
    m = twolevel_model(1.0, lam_plus, lam_minus, lam_one, TimeGrid(0.0, 30.0, 60))
    sigma = master_evolve(m, helpers.ground())[-1]
    rate = observed_rates(m, sigma)[0]
    expect = lam_one * lam_plus / (lam_plus + lam_minus + lam_one)
    assert abs(rate - expect) < 1e-8

    # sampled long-run rate agrees with the stationary value
    n, horizon = 400, 30.0
    total = 0
    for i in range(n):
        rec = simulate_counting_trajectory(
            m, helpers.ground(), rng=helpers.rng_for(31, i), snapshot_stride=0
        )
        total += len(rec.realization.events)
    mean_rate = total / (n * horizon)
    stderr = math.sqrt(expect / (n * horizon))  # Poisson-scale error bar
    assert abs(mean_rate - expect) < 5 * stderr


def test_martingale_structure():
    m = helpers.pure_decay_model(lam_one=2.0, horizon=1.0, steps=50)
    # find a no-count and a one-count trajectory (deterministic given seeds)
    recs = [
        simulate_counting_trajectory(m, helpers.excited(), rng=helpers.rng_for(900, i))
        for i in range(30)
    ]
    none = next(r for r in recs if len(r.realization.events) == 0)
    one = next(r for r in recs if len(r.realization.events) == 1)

    # conditioned on no count the state stays excited: <R> = 2 exactly
    np.testing.assert_allclose(none.compensator[:, 0], 2.0 * m.grid.times, atol=1e-9)
    np.testing.assert_allclose(none.martingale()[:, 0], -2.0 * m.grid.times, atol=1e-9)

    # after the count the rate vanishes; the compensator freezes
    t_ev = one.realization.events[0][0]
    expect = 2.0 * np.minimum(m.grid.times, t_ev)
    np.testing.assert_allclose(one.compensator[:, 0], expect, atol=1e-7)
    assert (np.diff(one.compensator[:, 0]) >= -1e-12).all()
    mart = one.martingale()[:, 0]
    assert mart[0] == 0.0
    assert abs(mart[-1] - (1.0 - 2.0 * t_ev)) < 1e-7


def test_sample_jump_inverts_survival():
    m = helpers.pure_decay_model(lam_one=2.0, horizon=4.0, steps=40)
    for u in (0.9, 0.5, 0.2):
        t_star, j_star, rho_star = sample_jump(
            m, helpers.excited(), 0.0, 4.0, u, helpers.rng_for(1)
        )
        assert j_star == 0
        assert abs(t_star - (-math.log(u) / 2.0)) < 1e-9 * 4.0
        np.testing.assert_allclose(rho_star, np.diag([0.0, 1.0]).astype(complex), atol=1e-12)
    # u below the horizon survival means no count before the horizon
    assert sample_jump(m, helpers.excited(), 0.0, 4.0, math.exp(-8.0) / 2, helpers.rng_for(1)) is None
    assert sample_jump(m, np.diag([0.0, 1.0]).astype(complex), 0.0, 4.0, 0.5, helpers.rng_for(1)) is None


def test_no_jump_propagate_survival():
    m = helpers.pure_decay_model(lam_one=2.0, horizon=1.0, steps=10)
    phi1, surv = no_jump_propagate(m, helpers.excited(), 0.0, 0.6)
    assert abs(surv - math.exp(-1.2)) < 1e-12
    np.testing.assert_allclose(phi1, np.diag([math.exp(-1.2), 0.0]), atol=1e-12)


# ---------------------------------------------------------------------------
# Euler-step forms
# ---------------------------------------------------------------------------

def test_nonlinear_step_replays_record_to_first_order():
    m = helpers.pumped_twolevel_model(horizon=0.5, steps=50)
    rho0, _ = _mixed_start()
    rec = simulate_counting_trajectory(m, rho0, rng=helpers.rng_for(77))
    events = list(rec.realization.events)

    dt = 1e-4
    n_steps = 5000
    rho = rho0.copy()
    ev_i = 0
    for k in range(n_steps):
        t = k * dt
        dN = [0]
        if ev_i < len(events) and t <= events[ev_i][0] < t + dt:
            dN = [1]
            ev_i += 1
        rho = nonlinear_counting_step(m, rho, t, dt, dN)
    assert ev_i == len(events)

    exact = rec.snapshots[-1]
    assert np.abs(rho - exact).max() < 1e-3


def test_nonlinear_step_local_order():
    m = helpers.pumped_twolevel_model(horizon=0.5, steps=50)
    rho0, _ = _mixed_start()
    exact, _ = no_jump_propagate(m, rho0, 0.0, 0.01)
    exact /= np.trace(exact).real
    errs = []
    for n in (1, 2, 4):
        dt = 0.01 / n
        rho = rho0.copy()
        for k in range(n):
            rho = nonlinear_counting_step(m, rho, k * dt, dt, [0])
        errs.append(np.abs(rho - exact).max())
    assert errs[0] / errs[1] > 1.7  # first-order global convergence
    assert errs[1] / errs[2] > 1.7


def test_pure_step_matches_density_step():
    m = helpers.pure_decay_model(lam_one=2.0, omega=0.7, horizon=1.0, steps=10)
    psi = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)
    dt = 1e-4
    psi1 = pure_counting_step(m, psi, 0.0, dt, [0])
    rho1 = nonlinear_counting_step(m, np.outer(psi, psi.conj()), 0.0, dt, [0])
    assert np.abs(np.outer(psi1, psi1.conj()) - rho1).max() < 1e-3
    # with a count both land on the ground state as dt -> 0
    psi_j = pure_counting_step(m, psi, 0.0, 1e-8, [1])
    assert abs(abs(psi_j[1]) - 1.0) < 1e-6


def test_jump_apply_normalizes():
    m = helpers.pumped_twolevel_model()
    rho0, _ = _mixed_start()
    out = jump_apply(m, rho0, 0.0, 0)
    np.testing.assert_allclose(out, np.diag([0.0, 1.0]), atol=1e-12)
    with pytest.raises(Exception):
        jump_apply(m, np.diag([0.0, 1.0]).astype(complex), 0.0, 0)


# ---------------------------------------------------------------------------
# record plumbing
# ---------------------------------------------------------------------------

def test_count_realization_validation():
    with pytest.raises(ConfigError):
        CountRealization(events=((0.5, 0), (0.2, 0)), horizon=1.0)
    with pytest.raises(ConfigError):
        CountRealization(events=((1.5, 0),), horizon=1.0)


def test_snapshot_stride_and_times():
    m = helpers.pure_decay_model(horizon=1.0, steps=20)
    rec = simulate_counting_trajectory(
        m, helpers.excited(), rng=helpers.rng_for(3), snapshot_stride=5
    )
    np.testing.assert_allclose(rec.snapshot_times, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert rec.snapshots.shape == (5, 2, 2)
    for s in rec.snapshots:
        assert abs(np.trace(s) - 1.0) < 1e-10

    rec0 = simulate_counting_trajectory(
        m, helpers.excited(), rng=helpers.rng_for(3), snapshot_stride=0
    )
    assert rec0.snapshots is None
    assert rec0.snapshot_times.size == 0
    assert rec0.realization.events == rec.realization.events  # draws unaffected

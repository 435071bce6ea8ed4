"""Closed-form oracles: two-level filter densities and oscillator Gaussian forms."""

import cmath
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

import helpers
from contmeas import (
    ConfigError,
    OutputPath,
    TimeGrid,
    coherent_state,
    constant_test_function,
    propagate_characteristic,
    thermal_state,
)
from contmeas.oracles import (
    GaussianPosterior,
    OscillatorParams,
    TwoLevelFilterState,
    TwoLevelParams,
    apriori_mean,
    apriori_number,
    apriori_pair_moment,
    oscillator_characteristic,
    oscillator_dw,
    output_covariance,
    output_pseudo_covariance,
    pure_decay_epd,
    riccati_posterior_evolve,
    riccati_residual,
    riccati_stationary,
    twolevel_filter_evolve,
)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# stationary Riccati variance
# ---------------------------------------------------------------------------

def test_stationary_variance_golden_ratio_point():
    # Γ = 1, |η|² = 1/2, λ↑ = 1/2 makes ν∞ the golden-ratio conjugate
    p = OscillatorParams(omega=0.0, lam_down=0.5, lam_up=0.5, eta=math.sqrt(0.5))
    assert abs(p.gamma - 1.0) < 1e-15
    nu = riccati_stationary(p)
    assert abs(nu - GOLDEN) < 1e-15
    assert abs(nu - 0.6180339887498949) < 1e-15
    assert abs(riccati_residual(p, nu)) < 1e-14


def test_stationary_variance_grid():
    lam_down = 1.0
    for lam_up in np.linspace(0.0, 0.9, 10):
        for eta2 in np.linspace(0.1, 2.0, 10):
            p = OscillatorParams(
                omega=0.7, lam_down=lam_down, lam_up=float(lam_up), eta=math.sqrt(eta2)
            )
            nu = riccati_stationary(p)
            assert nu >= 0.0
            assert abs(riccati_residual(p, nu)) <= 1e-12
            if lam_up == 0.0:
                assert nu == 0.0      # exactly, not just approximately
            else:
                assert nu > 0.0


# ---------------------------------------------------------------------------
# posterior moment evolution
# ---------------------------------------------------------------------------

def test_deterministic_moments_match_reference_integrator():
    p = OscillatorParams(omega=1.0, lam_down=0.5, lam_up=0.3, eta=1.0, g=0.2)
    grid = TimeGrid(0.0, 3.0, 3000)
    g0 = GaussianPosterior(mean=0.4 + 0.1j, mu=0.2 - 0.1j, nu=0.5)
    path = riccati_posterior_evolve(p, g0, None, grid)

    eta2 = abs(p.eta) ** 2

    def rhs(t, y):
        mu = y[0] + 1j * y[1]
        nu = y[2]
        dmu = -(2j * p.omega + p.gamma) * mu - 4.0 * eta2 * mu * nu
        dnu = -p.gamma * nu - 2.0 * eta2 * (abs(mu) ** 2 + nu**2) + 2.0 * p.lam_up
        return [dmu.real, dmu.imag, dnu]

    sol = solve_ivp(rhs, (0.0, 3.0), [0.2, -0.1, 0.5], rtol=1e-11, atol=1e-12)
    assert abs(path[-1].mu - (sol.y[0, -1] + 1j * sol.y[1, -1])) < 1e-8
    assert abs(path[-1].nu - sol.y[2, -1]) < 1e-8


def test_variance_converges_to_stationary_point():
    p = OscillatorParams(omega=0.5, lam_down=0.5, lam_up=0.5, eta=math.sqrt(0.5))
    horizon = 20.0 / p.gamma
    grid = TimeGrid(0.0, horizon, 20_000)
    path = riccati_posterior_evolve(p, GaussianPosterior(mean=0.0, nu=2.0), None, grid)
    assert abs(path[-1].nu - riccati_stationary(p)) < 1e-8
    assert all(s.mu == 0.0 for s in path)  # μ = 0 is preserved exactly


def test_coherent_branch_stays_pure_and_tracks_closed_form_mean():
    p = OscillatorParams(omega=1.0, lam_down=0.5, lam_up=0.0, eta=1.0, g=0.6)
    grid = TimeGrid(0.0, 2.0, 20_000)
    g0 = GaussianPosterior(mean=0.5, mu=0.0, nu=0.0)
    path = riccati_posterior_evolve(p, g0, None, grid)
    assert all(s.nu == 0.0 and s.mu == 0.0 for s in path)
    assert all(s.physicality_defect() <= 0.0 for s in path)
    # deterministic mean is plain Euler on a linear flow: O(dt) agreement
    alpha = apriori_mean(p, 0.5, 2.0)
    assert abs(path[-1].mean - alpha) < 1e-3


def test_posterior_validation():
    with pytest.raises(ConfigError):
        GaussianPosterior(mean=0.0, nu=-0.5)
    with pytest.raises(ConfigError):
        OscillatorParams(omega=0.0, lam_down=0.0, lam_up=2.0, eta=1.0)  # Γ ≤ 0
    with pytest.raises(ConfigError):
        OscillatorParams(omega=0.0, lam_down=-0.1, lam_up=0.0, eta=1.0)
    with pytest.raises(ConfigError):
        riccati_stationary(OscillatorParams(omega=0.0, lam_down=1.0, lam_up=0.5, eta=0.0))


def test_oscillator_dw_undoes_detection_gain():
    grid = TimeGrid(0.0, 1.0, 4)
    dY = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
    path = OutputPath(grid=grid.times, dY=dY, dM=np.zeros_like(dY))
    eta = 2.0 * cmath.exp(0.3j)
    dw = oscillator_dw(path, eta)
    np.testing.assert_allclose(
        dw, 0.5 * (dY[:, 0] + 1j * dY[:, 1]) / eta, atol=1e-15
    )


# ---------------------------------------------------------------------------
# characteristic coefficient system
# ---------------------------------------------------------------------------

def test_zero_test_function_recovers_apriori_moments():
    p = OscillatorParams(omega=1.0, lam_down=0.5, lam_up=0.15, eta=1.0, g=0.4)
    grid = TimeGrid(0.0, 2.0, 200)
    res = oscillator_characteristic(p, None, alpha0=0.3 + 0.2j, mu0=0.1j, nu0=0.7, grid=grid)
    assert np.abs(res.phi_path - 1.0).max() < 1e-12
    for i, t in enumerate(grid.times):
        assert abs(res.b[i] - apriori_mean(p, 0.3 + 0.2j, t)) < 1e-10
        assert abs(res.d[i] - apriori_pair_moment(p, 0.1j, t)) < 1e-10
        assert abs(res.f[i] - apriori_number(p, 0.7, t)) < 1e-10


def test_characteristic_matches_truncated_engine_coherent_start():
    omega, lam_down, lam_up, eta, g = 1.0, 0.5, 0.15, 1.0, 0.4
    dim, steps = 20, 50
    m = helpers.small_oscillator_model(
        dim=dim, omega=omega, lam_down=lam_down, lam_up=lam_up, g=g, horizon=1.0, steps=steps
    )
    p = OscillatorParams(omega=omega, lam_down=lam_down, lam_up=lam_up, eta=eta, g=g)
    kappa = 0.3 + 0.2j
    psi = coherent_state(dim, 0.2)
    rho0 = np.outer(psi, psi.conj())
    engine = propagate_characteristic(
        m, constant_test_function([kappa], steps, "complexified"), rho0
    )
    oracle = oscillator_characteristic(
        p, np.full(steps, kappa), alpha0=0.2, mu0=0.0, nu0=0.0, grid=m.grid
    )
    assert np.abs(engine.phi_path - oracle.phi_path).max() < 1e-6


def test_characteristic_matches_truncated_engine_thermal_start():
    omega, lam_down, lam_up, eta = 0.7, 0.6, 0.2, 1.0
    dim, steps = 25, 40
    m = helpers.small_oscillator_model(
        dim=dim, omega=omega, lam_down=lam_down, lam_up=lam_up, g=0.0, horizon=1.0, steps=steps
    )
    p = OscillatorParams(omega=omega, lam_down=lam_down, lam_up=lam_up, eta=eta)
    nbar = 0.3
    kappa = 0.25 - 0.15j
    engine = propagate_characteristic(
        m, constant_test_function([kappa], steps, "complexified"), thermal_state(dim, nbar)
    )
    oracle = oscillator_characteristic(
        p, np.full(steps, kappa), alpha0=0.0, mu0=0.0, nu0=nbar, grid=m.grid
    )
    assert np.abs(engine.phi_path - oracle.phi_path).max() < 1e-6


# ---------------------------------------------------------------------------
# output covariance kernels
# ---------------------------------------------------------------------------

def test_output_covariance_structure():
    p = OscillatorParams(omega=0.9, lam_down=0.5, lam_up=0.2, eta=1.0)
    nu0 = 0.4
    c_ab = output_covariance(p, nu0, 1.3, 0.4)
    c_ba = output_covariance(p, nu0, 0.4, 1.3)
    assert abs(c_ab - np.conj(c_ba)) < 1e-15
    expect = cmath.exp(-(1j * p.omega + 0.5 * p.gamma) * 0.9) * apriori_number(p, nu0, 0.4)
    assert abs(c_ab - expect) < 1e-15

    with pytest.raises(ConfigError):
        output_covariance(p, nu0, 0.7, 0.7)        # diagonal delta needs dt
    dt = 1e-3
    diag = output_covariance(p, nu0, 0.7, 0.7, dt=dt)
    assert abs(diag - (1.0 / (2.0 * dt) + apriori_number(p, nu0, 0.7))) < 1e-12


def test_output_covariance_stationary_form():
    p = OscillatorParams(omega=0.9, lam_down=0.5, lam_up=0.2, eta=1.0)
    nu_st = 2.0 * p.lam_up / p.gamma
    for s, sp in ((2.0, 1.5), (0.3, 1.1), (5.0, 5.5)):
        got = output_covariance(p, nu_st, s, sp)
        expect = nu_st * cmath.exp(-0.5 * p.gamma * abs(s - sp)) * cmath.exp(-1j * p.omega * (s - sp))
        assert abs(got - expect) < 1e-14


def test_output_pseudo_covariance():
    p = OscillatorParams(omega=0.9, lam_down=0.5, lam_up=0.2, eta=1.0)
    mu0 = 0.3 - 0.2j
    got = output_pseudo_covariance(p, mu0, 1.2, 0.7)
    assert abs(got - cmath.exp(-(1j * p.omega + 0.5 * p.gamma) * 1.9) * mu0) < 1e-15


# ---------------------------------------------------------------------------
# two-level closed forms
# ---------------------------------------------------------------------------

def test_twolevel_no_count_branch():
    p = TwoLevelParams(omega=0.8, lam_plus=0.0, lam_minus=0.0, lam_one=2.0)
    grid = TimeGrid(0.0, 1.0, 10)
    from contmeas import CountRealization

    s0 = TwoLevelFilterState(pi0=0.3, pi1=0.7, zeta=0.5 + 0.2j)
    states = twolevel_filter_evolve(p, s0, CountRealization(events=(), horizon=1.0), grid)
    for st, t in zip(states, grid.times):
        assert abs(st.pi0 - 0.3) < 1e-12                       # nothing feeds the ground state
        assert abs(st.pi1 - 0.7 * math.exp(-2.0 * t)) < 1e-12
        zeta = (0.5 + 0.2j) * cmath.exp(-(1j * p.omega + p.kappa) * t)
        assert abs(st.zeta - zeta) < 1e-12


def test_twolevel_jump_resets_coherence():
    p = TwoLevelParams(omega=0.8, lam_plus=0.4, lam_minus=0.3, lam_one=1.0)
    grid = TimeGrid(0.0, 2.0, 20)
    from contmeas import CountRealization

    s0 = TwoLevelFilterState(pi0=0.3, pi1=0.7, zeta=0.5)
    states = twolevel_filter_evolve(
        p, s0, CountRealization(events=((0.55, 0),), horizon=2.0), grid
    )
    after = states[6]  # node at t = 0.6, just past the count
    assert after.pi1 > 0.0 or after.pi0 > 0.0
    # the jump empties the excited level and kills the coherence
    node = states[6]
    assert abs(node.zeta) < 1e-12
    # ground weight right after the jump is the pre-jump excited weight decayed
    assert node.pi0 > 0.0


def test_twolevel_state_validation():
    with pytest.raises(ConfigError):
        TwoLevelFilterState(pi0=-0.1, pi1=0.5)
    with pytest.raises(ConfigError):
        TwoLevelFilterState(pi0=0.0, pi1=0.0)
    with pytest.raises(ConfigError):
        TwoLevelFilterState(pi0=0.5, pi1=0.5, zeta=1.5)  # |ζ|² > 4π₀π₁
    s = TwoLevelFilterState(pi0=0.25, pi1=0.75, zeta=0.2j)
    assert abs(np.trace(s.as_matrix()) - 1.0) < 1e-15
    with pytest.raises(ConfigError):
        TwoLevelParams(omega=0.0, lam_plus=0.0, lam_minus=0.0, lam_one=0.0)


def test_pure_decay_epd_argument_errors():
    p = TwoLevelParams(omega=0.0, lam_plus=0.0, lam_minus=0.3, lam_one=1.0)
    pumped = TwoLevelParams(omega=0.0, lam_plus=0.5, lam_minus=0.3, lam_one=1.0)
    with pytest.raises(ConfigError):
        pure_decay_epd(pumped, 0.5, 1.0)
    with pytest.raises(ConfigError):
        pure_decay_epd(p, 1.5, 1.0)
    with pytest.raises(ConfigError):
        pure_decay_epd(p, 0.5, 1.0, t1=1.2)

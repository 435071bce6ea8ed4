"""Model construction, Liouvillian structure, and master propagation."""

import math

import numpy as np
import pytest

import helpers
from contmeas import (
    ConfigError,
    ContractViolationError,
    CountingChannel,
    DiffusiveChannel,
    MeasurementModel,
    TimeGrid,
    liouvillian_apply,
    liouvillian_matrix,
    master_evolve,
    model_from_config,
    model_to_config,
    oscillator_model,
    twolevel_model,
)
from contmeas.hilbert import herm_defect, trace_row, vec
from contmeas.model import (
    coherent_state,
    fock_ops,
    no_count_matrix,
    pauli,
    rate_operator,
    thermal_state,
)

RNG = helpers.rng_for(4242)


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def test_grid_basics():
    g = TimeGrid(0.0, 2.0, 8)
    assert g.dt == 0.25
    assert len(g.times) == 9
    assert g.cell_index(0.0) == 0
    assert g.cell_index(2.0) == 7       # right endpoint clamps into the last cell
    assert g.cell_index(0.25) == 1      # boundaries belong to the right cell
    assert g.cell_index(-5.0) == 0
    assert g.cell_index(99.0) == 7


def test_grid_validation():
    with pytest.raises(ConfigError):
        TimeGrid(0.0, 1.0, 0)
    with pytest.raises(ConfigError):
        TimeGrid(1.0, 1.0, 4)


# ---------------------------------------------------------------------------
# channels and rate operators
# ---------------------------------------------------------------------------

def test_rate_operator_frozen():
    p = pauli()
    ch = CountingChannel(kraus=(np.sqrt(2.0) * p["sm"],))
    np.testing.assert_allclose(rate_operator(ch), np.diag([2.0, 0.0]), atol=1e-14)


def test_rate_operator_multi_kraus():
    p = pauli()
    ch = CountingChannel(kraus=(np.sqrt(0.5) * p["sp"], np.sqrt(0.3) * p["sm"]))
    np.testing.assert_allclose(rate_operator(ch), np.diag([0.3, 0.5]), atol=1e-14)


def test_diffusive_channel_rejects_zero_weight():
    p = pauli()
    with pytest.raises(ConfigError):
        DiffusiveChannel(z=p["sm"], f=0.0)


def test_channel_superop_is_sandwich_sum():
    p = pauli()
    ch = CountingChannel(kraus=(np.sqrt(1.5) * p["sm"],))
    rho = helpers.random_state(RNG, 2)
    out = (ch.superop() @ vec(rho)).reshape(2, 2)
    np.testing.assert_allclose(out, 1.5 * p["sm"] @ rho @ p["sp"], atol=1e-14)


# ---------------------------------------------------------------------------
# model validation
# ---------------------------------------------------------------------------

def test_non_hermitian_hamiltonian_rejected():
    with pytest.raises((ConfigError, Exception)):
        MeasurementModel(dim=2, hamiltonian=np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_schedule_slab_count_must_match_grid():
    h = np.zeros((3, 2, 2))
    with pytest.raises(ConfigError):
        MeasurementModel(dim=2, hamiltonian=h, grid=TimeGrid(0.0, 1.0, 5))


def test_require_mode():
    m = helpers.pure_decay_model()
    m.require_mode("counting")
    with pytest.raises(ContractViolationError):
        m.require_mode("diffusive")


# ---------------------------------------------------------------------------
# Liouvillian structure
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "model",
    [
        helpers.pure_decay_model(),
        helpers.pumped_twolevel_model(),
        helpers.twolevel_diffusive_model(omega=1.0),
        helpers.small_oscillator_model(dim=6),
    ],
    ids=["pure-decay", "pumped", "twolevel-diffusive", "oscillator"],
)
def test_liouvillian_annihilates_trace(model):
    lmat = liouvillian_matrix(model, 0)
    defect = np.abs(trace_row(model.dim) @ lmat).max()
    assert defect <= 1e-10 * (1.0 + np.abs(lmat).max())


def test_liouvillian_splits_into_no_count_plus_jumps():
    m = helpers.pumped_twolevel_model()
    total = no_count_matrix(m, 0).astype(complex)
    for ch in m.counting:
        total = total + ch.superop()
    np.testing.assert_allclose(total, liouvillian_matrix(m, 0), atol=1e-12)


def test_liouvillian_apply_matches_matrix():
    m = helpers.small_oscillator_model(dim=5)
    rho = helpers.random_state(RNG, 5)
    via_matrix = (liouvillian_matrix(m, 0) @ vec(rho)).reshape(5, 5)
    np.testing.assert_allclose(liouvillian_apply(m, rho, 0.0), via_matrix, atol=1e-12)


def test_no_count_trace_drain_is_observed_rate():
    # Tr{A |1><1|} = −λ₁: only the observed channel leaves the no-count flow
    lam_minus, lam_one = 0.3, 1.0
    m = twolevel_model(0.0, 0.0, lam_minus, lam_one)
    rho = helpers.excited()
    drain = float((trace_row(2) @ no_count_matrix(m, 0) @ vec(rho)).real)
    assert abs(drain - (-lam_one)) < 1e-12


def test_liouvillian_on_maximally_mixed():
    # d<1|ρ|1>/dt at ρ = I/2 is λ₊/2 − (λ₋+λ₁)/2
    lam_plus, lam_minus, lam_one = 0.5, 0.3, 1.0
    m = twolevel_model(1.0, lam_plus, lam_minus, lam_one)
    out = liouvillian_apply(m, np.eye(2, dtype=complex) / 2.0, 0.0)
    expect = lam_plus / 2.0 - (lam_minus + lam_one) / 2.0
    assert abs(out[0, 0].real - expect) < 1e-12


# ---------------------------------------------------------------------------
# master propagation
# ---------------------------------------------------------------------------

def test_master_pure_decay_population():
    lam_minus, lam_one = 0.3, 1.0
    m = twolevel_model(0.0, 0.0, lam_minus, lam_one, TimeGrid(0.0, 0.7, 70))
    states = master_evolve(m, helpers.excited())
    expect = math.exp(-(lam_minus + lam_one) * 0.7)
    assert abs(states[-1][0, 0].real - expect) < 1e-10
    assert all(herm_defect(s) < 1e-12 for s in states)


def test_master_vacuum_is_stationary():
    m = oscillator_model(6, 1.0, 0.5, 0.0, 1.0, 0.0, TimeGrid(0.0, 2.0, 40))
    vac = np.zeros((6, 6), dtype=complex)
    vac[0, 0] = 1.0
    states = master_evolve(m, vac)
    assert np.abs(states[-1] - vac).max() < 1e-12


def test_master_pumped_reaches_stationary_population():
    lam_plus, lam_minus, lam_one = 0.5, 0.3, 1.0
    m = twolevel_model(1.0, lam_plus, lam_minus, lam_one, TimeGrid(0.0, 20.0, 200))
    states = master_evolve(m, helpers.ground())
    expect = lam_plus / (lam_plus + lam_minus + lam_one)
    assert abs(states[-1][0, 0].real - expect) < 1e-8


def test_master_thermal_fixed_point():
    # detailed balance: λ↑/λ↓ = nbar/(nbar+1) fixes the thermal state (η=0 ⇒
    # no detection back-action on the a-priori flow, λ↓ acts at rate 2λ↓ etc.)
    lam_down, lam_up = 0.6, 0.2
    nbar = lam_up / (lam_down - lam_up)
    dim = 25
    m = MeasurementModel(
        dim=dim,
        hamiltonian=fock_ops(dim)["n"],
        dissipators=(
            CountingChannel(
                kraus=(
                    np.sqrt(2 * lam_down) * fock_ops(dim)["a"],
                    np.sqrt(2 * lam_up) * fock_ops(dim)["adag"],
                ),
                observed=False,
            ),
        ),
        grid=TimeGrid(0.0, 1.0, 10),
    )
    rho = thermal_state(dim, nbar)
    out = liouvillian_apply(m, rho, 0.0)
    # truncation injects error at the top of the ladder only
    assert np.abs(out[:-2, :-2]).max() < 1e-10


def test_schedule_hamiltonian_is_used_per_cell():
    p = pauli()
    h = np.stack([0.0 * p["s3"], 1.0 * p["s3"]])
    m = MeasurementModel(dim=2, hamiltonian=h, grid=TimeGrid(0.0, 1.0, 2))
    assert not m.is_static
    np.testing.assert_array_equal(m.h_at(0), h[0])
    np.testing.assert_array_equal(m.h_at(1), h[1])
    l0 = liouvillian_matrix(m, 0)
    l1 = liouvillian_matrix(m, 1)
    assert np.abs(l0).max() < 1e-14
    assert np.abs(l1).max() > 0.5


# ---------------------------------------------------------------------------
# state helpers and config round trip
# ---------------------------------------------------------------------------

def test_thermal_state_mean_occupation():
    dim, nbar = 40, 1.5
    rho = thermal_state(dim, nbar)
    mean = float(np.trace(fock_ops(dim)["n"] @ rho).real)
    assert abs(mean - nbar) < 1e-6       # truncation tail only


def test_coherent_state_moments():
    dim, alpha = 30, 0.8 + 0.3j
    psi = coherent_state(dim, alpha)
    assert abs(np.linalg.norm(psi) - 1.0) < 1e-12
    mean = np.vdot(psi, fock_ops(dim)["a"] @ psi)
    assert abs(mean - alpha) < 1e-10


def test_config_roundtrip():
    for m in (
        helpers.pumped_twolevel_model(),
        helpers.small_oscillator_model(dim=4),
        helpers.twolevel_diffusive_model(omega=0.5),
    ):
        m2 = model_from_config(model_to_config(m))
        assert m2.dim == m.dim
        np.testing.assert_allclose(
            liouvillian_matrix(m2, 0), liouvillian_matrix(m, 0), atol=1e-12
        )
        assert len(m2.counting) == len(m.counting)
        assert len(m2.diffusive) == len(m.diffusive)


def test_config_errors_name_field_paths():
    with pytest.raises(ConfigError, match="model.dim"):
        model_from_config({"grid": {"t0": 0, "t1": 1, "steps": 2}})
    with pytest.raises(ConfigError, match="model.hamiltonian"):
        model_from_config({"dim": 2, "grid": {"t0": 0, "t1": 1, "steps": 2}})
    bad = {
        "dim": 2,
        "hamiltonian": [[[0, 0], [0, 0]], [[0, 0], [0, 0]]],
        "diffusive": [{"z": [[[0, 0], [0, 0]], [[1, 0], [0, 0]]], "f": [0.0, 0.0]}],
        "grid": {"t0": 0, "t1": 1, "steps": 2},
    }
    with pytest.raises(ConfigError):
        model_from_config(bad)

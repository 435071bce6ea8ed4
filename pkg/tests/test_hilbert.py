"""Operator-algebra and propagation primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

import helpers
from contmeas import ContractViolationError
from contmeas.hilbert import (
    CellPropagator,
    DEFAULT_TOL,
    dag,
    expm_propagate,
    herm_defect,
    herm_part,
    left_mult,
    op_norm_1,
    purity,
    right_mult,
    rk4_substeps,
    sandwich,
    spectral_floor,
    superop_matrix,
    trace_distance,
    trace_row,
    unvec,
    vec,
)

RNG = helpers.rng_for(77)


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# frozen examples
# ---------------------------------------------------------------------------

def test_expm_dt_zero_is_identity():
    x = random_complex(RNG, 3, 3)
    g = random_complex(RNG, 9, 9)
    np.testing.assert_array_equal(expm_propagate(g, x, 0.0), x)


def test_expm_scalar_decay():
    # one-dimensional: exp(-1)·x
    x = np.array([[2.0 + 0.5j]])
    out = expm_propagate(np.array([[-1.0 + 0j]]), x, 1.0)
    assert abs(out[0, 0] - np.exp(-1.0) * x[0, 0]) < 1e-14


def test_expm_nilpotent_is_exact():
    # G = [[0,1],[0,0]] on vec space: exp(G·dt) = I + G·dt, no series tail
    g = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    # dim=... vec dimension 2 does not come from a square operator; use the
    # 2x2 operator space of a 1x1 block pair instead: wrap as direct matrix
    y = np.array([3.0, 4.0], dtype=complex)
    out = expm(g * 0.7) @ y
    np.testing.assert_allclose(out, [3.0 + 0.7 * 4.0, 4.0], atol=1e-15)


def test_spectral_floor_frozen():
    x = np.array([[0.5, 0.7], [0.7, 0.5]], dtype=complex)
    assert abs(spectral_floor(x) - (-0.2)) < 1e-12


def test_spectral_floor_rejects_non_hermitian():
    with pytest.raises(ContractViolationError):
        spectral_floor(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_trace_distance_orthogonal_projectors():
    a = np.diag([1.0, 0.0]).astype(complex)
    b = np.diag([0.0, 1.0]).astype(complex)
    assert abs(trace_distance(a, b) - 1.0) < 1e-14
    assert abs(trace_distance(a, a)) < 1e-14


def test_purity_extremes():
    assert abs(purity(np.diag([1.0, 0.0])) - 1.0) < 1e-14
    assert abs(purity(np.diag([0.5, 0.5])) - 0.5) < 1e-14


# ---------------------------------------------------------------------------
# vectorization identities
# ---------------------------------------------------------------------------

def test_vec_unvec_roundtrip():
    x = random_complex(RNG, 4, 4)
    np.testing.assert_array_equal(unvec(vec(x), 4), x)


def test_multiplication_superoperators():
    a = random_complex(RNG, 3, 3)
    b = random_complex(RNG, 3, 3)
    x = random_complex(RNG, 3, 3)
    np.testing.assert_allclose(unvec(left_mult(a) @ vec(x), 3), a @ x, atol=1e-12)
    np.testing.assert_allclose(unvec(right_mult(b) @ vec(x), 3), x @ b, atol=1e-12)
    np.testing.assert_allclose(unvec(sandwich(a, b) @ vec(x), 3), a @ x @ b, atol=1e-12)


def test_trace_row_identity():
    x = random_complex(RNG, 5, 5)
    assert abs(trace_row(5) @ vec(x) - np.trace(x)) < 1e-12


def test_superop_matrix_reconstructs_sandwich():
    a = random_complex(RNG, 3, 3)
    b = random_complex(RNG, 3, 3)
    mat = superop_matrix(lambda x: a @ x @ b, 3)
    np.testing.assert_allclose(mat, sandwich(a, b), atol=1e-12)


# ---------------------------------------------------------------------------
# invariants (property style)
# ---------------------------------------------------------------------------

@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_adjoint_involution(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    np.testing.assert_array_equal(dag(dag(x)), x)
    assert herm_defect(herm_part(x)) < 1e-15


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_trace_cyclicity(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    assert abs(np.trace(a @ b) - np.trace(b @ a)) < 1e-12 * (1 + abs(np.trace(a @ b)))


def test_expm_linearity():
    g = random_complex(RNG, 9, 9)
    x1 = random_complex(RNG, 3, 3)
    x2 = random_complex(RNG, 3, 3)
    lhs = expm_propagate(g, x1 + 2.0 * x2, 0.3)
    rhs = expm_propagate(g, x1, 0.3) + 2.0 * expm_propagate(g, x2, 0.3)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_expm_semigroup():
    g = random_complex(RNG, 4, 4)
    g = g - np.eye(4) * op_norm_1(g)  # damp so norms stay tame
    x = random_complex(RNG, 2, 2)
    once = expm_propagate(g, x, 0.8)
    twice = expm_propagate(g, expm_propagate(g, x, 0.5), 0.3)
    np.testing.assert_allclose(once, twice, atol=1e-8)


def test_expm_preserves_hermiticity_for_lindblad_form():
    # a dissipator-style generator maps Hermitian to Hermitian
    k = random_complex(RNG, 3, 3)
    kdk = dag(k) @ k

    def lind(x):
        return k @ x @ dag(k) - 0.5 * (kdk @ x + x @ kdk)

    g = superop_matrix(lind, 3)
    rho = helpers.random_state(RNG, 3)
    out = expm_propagate(g, rho, 0.5)
    assert herm_defect(out) < 1e-10


def test_rk4_matches_expm_above_cap():
    # force both branches on the same small problem and compare
    g = random_complex(RNG, 9, 9)
    g = 0.3 * g / op_norm_1(g)
    x = random_complex(RNG, 3, 3)
    exact = expm_propagate(g, x, 1.0, method="expm")
    rk4 = expm_propagate(g, x, 1.0, method="rk4")
    np.testing.assert_allclose(rk4, exact, atol=1e-9)


def test_rk4_substep_policy():
    assert rk4_substeps(1.0, 1.0) == 10          # ‖G‖h ≤ 0.1
    assert rk4_substeps(0.0, 1.0) == 1
    assert rk4_substeps(5.0, 0.01) == 1


def test_default_method_switches_at_dim_cap():
    # dim 16 → vec dim 256 → exact; dim 17 → 289 → RK4.  Same generator
    # restricted appropriately must agree well within RK4 accuracy.
    dim = 17
    h = helpers.random_hermitian(RNG, dim)

    def ham(x):
        return -1j * (h @ x - x @ h)

    rho = helpers.random_state(RNG, dim)
    out_auto = expm_propagate(ham, rho, 0.05)
    out_exact = expm(-1j * h * 0.05) @ rho @ expm(1j * h * 0.05)
    np.testing.assert_allclose(out_auto, out_exact, atol=1e-10)


def test_cell_propagator_matches_expm_and_caches():
    g = random_complex(RNG, 9, 9)
    g = g / op_norm_1(g)
    cell = CellPropagator(g)
    y = random_complex(RNG, 9)
    np.testing.assert_allclose(cell.apply(y, 0.4), expm(g * 0.4) @ y, atol=1e-10)
    np.testing.assert_allclose(cell.matrix(0.4), expm(g * 0.4), atol=1e-10)
    # second call hits the cache and stays identical
    np.testing.assert_array_equal(cell.matrix(0.4), cell.matrix(0.4))

r"""Characteristic-functional machinery.

The characteristic functional of the output law up to time ``t`` is

    Φ_t[k] = E[exp(i Σ_j ∫₀ᵗ k_j(s) dN_j(s))]        (counting)
    Φ_t[k] = E[exp(i Σ_j ∫₀ᵗ k_j(s) dY_j(s))]        (diffusive),

and it is computable without sampling: Φ_t[k] = Tr{𝒢_t[k] ρ₀} where the
characteristic operator solves d𝒢/dt = 𝒦_t(k(t)) 𝒢, 𝒢₀ = Id, with

    𝒦(k)ρ = ℒρ + Σ_j (e^{i k_j} − 1) 𝒥_j ρ                       (counting)
    𝒦(k)ρ = ℒρ + Σ_j {−½ k_j² |f_j|² ρ + i k_j (f_j* Z_j ρ + f_j ρ Z_j†)}
                                                                  (diffusive).

When channels come in quadrature pairs (Z,1),(Z,i) the two real arguments of
a pair combine into one complex κ = k_re + i·k_im and the pair's generator
terms reduce to −½|κ|²ρ + i(κ* Zρ + κ ρZ†); the matching output functional is
exp[i ∫ 2Re(κ* dW)] with dW = ½(dY_re + i·dY_im).  ``mode="complexified"``
exposes exactly this reduction on top of the paired diffusive model.

Test functions are piecewise constant on the run grid; each cell is advanced
by the exact exponential of the frozen (non-trace-preserving) generator,
cached per distinct (schedule cell, k value).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractViolationError
from .hilbert import (
    DEFAULT_TOL,
    CellPropagator,
    Tolerances,
    dag,
    left_mult,
    require_state,
    right_mult,
)
from .counting import TrajectoryRecord
from .diffusive import OutputPath
from .model import MeasurementModel, TimeGrid, liouvillian_matrix

PHI_BOUND_SLACK = 1e-6

_MODES = ("counting", "diffusive", "complexified")


@dataclass(frozen=True)
class TestFunction:
    """Per-channel test function sampled on the run-grid cells.

    ``values[j, s]`` is the (piecewise-constant) value of ``k_j`` on cell
    ``s``.  Real in counting/diffusive mode; complex per quadrature pair in
    complexified mode (one row per pair).
    """

    values: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"test-function mode must be one of {_MODES}, got {self.mode!r}")
        v = np.asarray(self.values, dtype=complex if self.mode == "complexified" else float)
        if v.ndim != 2:
            raise ConfigError(f"test-function values must be (n_channels, n_cells), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ConfigError("test-function values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]


def constant_test_function(k: Sequence[complex], steps: int, mode: str) -> TestFunction:
    """Constant-in-time test function with one value per channel."""
    k = np.atleast_1d(k)
    return TestFunction(values=np.repeat(k[:, None], steps, axis=1), mode=mode)


@dataclass
class CharacteristicResult:
    """Φ along the grid, plus the final characteristic-operator state."""

    times: np.ndarray
    phi_path: np.ndarray               # (n_nodes,) complex
    mode: str
    g_path: Optional[np.ndarray] = None     # (n_nodes, d, d): 𝒢_t[k]ρ0 (deterministic)
    stderr: Optional[np.ndarray] = None     # (n_nodes,) Monte Carlo standard error
    n_traj: Optional[int] = None

    @property
    def phi(self) -> complex:
        return complex(self.phi_path[-1])

    @property
    def g_rho(self) -> Optional[np.ndarray]:
        return None if self.g_path is None else self.g_path[-1]


def _expected_channels(m: MeasurementModel, mode: str) -> int:
    if mode == "counting":
        m.require_mode("counting")
        return len(m.counting)
    m.require_mode("diffusive")
    if mode == "diffusive":
        return len(m.diffusive)
    if len(m.diffusive) % 2:
        raise ConfigError("complexified mode needs channels in quadrature pairs (even count)")
    return len(m.diffusive) // 2


def _pair_expand(m: MeasurementModel, kappa: np.ndarray, cell: int) -> np.ndarray:
    """Map complex κ per pair to real k per channel, validating the pairing."""
    k = np.empty(2 * len(kappa))
    for p, kap in enumerate(kappa):
        f_re = m.diffusive[2 * p].f_at(cell)
        f_im = m.diffusive[2 * p + 1].f_at(cell)
        if abs(f_re - 1.0) > 1e-12 or abs(f_im - 1.0j) > 1e-12:
            raise ConfigError(
                f"complexified mode expects channel pair {2*p},{2*p+1} with weights (1, i); "
                f"got ({f_re}, {f_im}) — build the model with complexify_channels"
            )
        if not np.allclose(m.diffusive[2 * p].z, m.diffusive[2 * p + 1].z):
            raise ConfigError(f"complexified channel pair {2*p},{2*p+1} must share one operator Z")
        k[2 * p] = kap.real
        k[2 * p + 1] = kap.imag
    return k


def characteristic_generator_matrix(
    m: MeasurementModel,
    kcol: np.ndarray,
    cell: int,
    mode: str,
) -> np.ndarray:
    """The frozen generator 𝒦(k) on one cell, as a dim²×dim² matrix."""
    d = m.dim
    kmat = liouvillian_matrix(m, cell).astype(complex)
    if mode == "counting":
        for j, ch in enumerate(m.counting):
            kmat += (np.exp(1j * kcol[j]) - 1.0) * ch.superop()
        return kmat
    if mode == "complexified":
        kcol = _pair_expand(m, np.asarray(kcol, dtype=complex), cell)
    eye = np.eye(d * d)
    for j, ch in enumerate(m.diffusive):
        f = ch.f_at(cell)
        kj = float(np.real(kcol[j]))
        kmat += -0.5 * kj**2 * abs(f) ** 2 * eye
        kmat += 1j * kj * (np.conj(f) * left_mult(ch.z) + f * right_mult(dag(ch.z)))
    return kmat


def _check_phi_bound(phi_path: np.ndarray, times: np.ndarray) -> None:
    mags = np.abs(phi_path)
    bad = np.nonzero(mags > 1.0 + PHI_BOUND_SLACK)[0]
    if len(bad):
        i = int(bad[0])
        raise ContractViolationError(
            f"|phi({times[i]:g})| = {mags[i]:.8f} exceeds 1 (generator-sign or discretization error)"
        )


def propagate_characteristic(
    m: MeasurementModel,
    k: TestFunction,
    rho0: np.ndarray,
    grid: TimeGrid | None = None,
    *,
    tol: Tolerances = DEFAULT_TOL,
) -> CharacteristicResult:
    """Deterministic Φ_t[k] by propagating the characteristic operator.

    The run grid must subdivide the model's schedule grid when the model is
    time dependent.
    """
    grid = grid or m.grid
    n_ch = _expected_channels(m, k.mode)
    if k.values.shape != (n_ch, grid.steps):
        raise ConfigError(
            f"test function has shape {k.values.shape}; model/grid expect ({n_ch}, {grid.steps})"
        )
    rho0 = np.asarray(rho0, dtype=complex)
    require_state(rho0, tol, what="initial state")

    times = grid.times
    d = m.dim
    if m.is_static:
        slots = np.zeros(grid.steps, dtype=int)
    else:
        slots = np.array([m.grid.cell_index(0.5 * (times[s] + times[s + 1])) for s in range(grid.steps)])
        bounds = m.grid.t0 + np.arange(m.grid.steps + 1) * m.grid.dt
        if not np.isclose(times[0], m.grid.t0) or not np.isclose(times[-1], m.grid.t1):
            raise ConfigError("run grid must span the schedule grid of a time-dependent model")
        for b in bounds:
            if not np.isclose(times, b).any():
                raise ConfigError("run grid must subdivide the schedule grid of a time-dependent model")

    y = rho0.reshape(-1).copy()
    phi_path = np.empty(grid.steps + 1, dtype=complex)
    g_path = np.empty((grid.steps + 1, d, d), dtype=complex)
    phi_path[0] = np.trace(rho0)
    g_path[0] = rho0
    cache: dict = {}
    for s in range(grid.steps):
        kcol = k.values[:, s]
        key = (int(slots[s]), kcol.tobytes())
        prop = cache.get(key)
        if prop is None:
            prop = CellPropagator(characteristic_generator_matrix(m, kcol, int(slots[s]), k.mode))
            cache[key] = prop
        y = prop.apply(y, grid.dt)
        g_path[s + 1] = y.reshape(d, d)
        phi_path[s + 1] = np.trace(g_path[s + 1])
    _check_phi_bound(phi_path, times)
    return CharacteristicResult(times=times, phi_path=phi_path, mode=k.mode, g_path=g_path)


# ---------------------------------------------------------------------------
# Monte Carlo estimation from ensembles
# ---------------------------------------------------------------------------

def _counting_exponents(records: Sequence[TrajectoryRecord], k: TestFunction, grid: TimeGrid) -> np.ndarray:
    """Σ_j ∫ k_j dN_j at every node, per trajectory: shape (n_traj, n_nodes)."""
    out = np.zeros((len(records), grid.steps + 1))
    for r, rec in enumerate(records):
        if rec.realization is None:
            raise ConfigError("Monte Carlo characteristic needs counting records with events")
        acc = 0.0
        ev = list(rec.realization.events)
        ei = 0
        nodes = grid.times
        for node in range(1, grid.steps + 1):
            while ei < len(ev) and ev[ei][0] <= nodes[node] + 1e-12 * max(1.0, abs(grid.t1)):
                t_ev, j_ev = ev[ei]
                # an event landing exactly on a node counts toward the cell
                # that ends there, matching the engine's right-limit records
                cell = min(grid.cell_index(t_ev), node - 1)
                acc += float(k.values[j_ev, cell].real)
                ei += 1
            out[r, node] = acc
    return out


def _diffusive_exponents(paths: Sequence[OutputPath], k: TestFunction, grid: TimeGrid) -> np.ndarray:
    """Σ_j ∫ k_j dY_j at every node, per trajectory: shape (n_traj, n_nodes)."""
    if k.mode == "complexified":
        kval = np.empty((2 * k.n_channels, k.n_cells))
        kval[0::2] = k.values.real
        kval[1::2] = k.values.imag
    else:
        kval = k.values
    out = np.zeros((len(paths), grid.steps + 1))
    for r, path in enumerate(paths):
        if path.dY.shape != (grid.steps, kval.shape[0]):
            raise ConfigError(
                f"output path shape {path.dY.shape} does not match grid/test function "
                f"({grid.steps}, {kval.shape[0]})"
            )
        np.cumsum((path.dY * kval.T).sum(axis=1), out=out[r, 1:])
    return out


def monte_carlo_characteristic(
    records: Sequence[TrajectoryRecord] | Sequence[OutputPath],
    k: TestFunction,
    grid: TimeGrid,
) -> CharacteristicResult:
    """Estimate Φ_t[k] as the ensemble mean of exp(i Σ_j ∫ k_j dN_j or dY_j)."""
    if len(records) == 0:
        raise ConfigError("Monte Carlo characteristic needs a nonempty ensemble")
    if k.values.shape[1] != grid.steps:
        raise ConfigError(f"test function has {k.values.shape[1]} cells; grid has {grid.steps}")
    if isinstance(records[0], OutputPath):
        if k.mode == "counting":
            raise ConfigError("counting test function cannot be paired with diffusive output paths")
        exponents = _diffusive_exponents(records, k, grid)
    else:
        if k.mode != "counting":
            raise ConfigError(f"{k.mode!r} test function cannot be paired with counting records")
        exponents = _counting_exponents(records, k, grid)
    v = np.exp(1j * exponents)                      # (n_traj, n_nodes)
    n = v.shape[0]
    phi_path = v.mean(axis=0)
    if n > 1:
        var = v.real.var(axis=0, ddof=1) + v.imag.var(axis=0, ddof=1)
        stderr = np.sqrt(var / n)
    else:
        stderr = np.zeros_like(phi_path, dtype=float)
    _check_phi_bound(phi_path, grid.times)
    return CharacteristicResult(
        times=grid.times,
        phi_path=phi_path,
        mode=k.mode,
        stderr=stderr,
        n_traj=n,
    )

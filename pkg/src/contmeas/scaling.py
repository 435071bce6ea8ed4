r"""The counting→diffusion limit harness.

A diffusive model (channels ``(Z_j, f_j)``) is approximated by a family of
counting models indexed by ε > 0: each detector gets the Kraus factor
``Z_j + f_j/ε`` and the Hamiltonian the compensating shift
``(i/2ε) Σ_j (f_j Z_j† − f_j* Z_j)``, chosen so the a-priori Liouvillian is
exactly ε-independent (asserted at construction).  The centered, rescaled
outputs

    Y_j^ε(t) = ε N_j(t) − |f_j|² t / ε

then converge to the diffusive outputs: their increments obey
``(dY^ε)² = |f|²dt + ε·dY^ε`` (the Itô table migrates from Poisson to
Wiener), and the characteristic-operator generator with test function εk
plus the centering term converges to the diffusive generator at rate O(ε).
`generator_gap` measures that distance; `limit_sweep` produces the per-ε
report rows used by the command-line ``limit`` mode.

Count rates grow like |f|²/ε², so small ε is expensive: the harness caps the
expected number of counts per trajectory (default 10⁶) and refuses beyond.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractViolationError
from .hilbert import dag, sandwich
from .charfun import TestFunction, characteristic_generator_matrix
from .counting import TrajectoryRecord
from .kernels import build_counting_plan, raise_for_status, run_counting_trajectory_raw
from .model import (
    CountingChannel,
    MeasurementModel,
    TimeGrid,
    liouvillian_matrix,
    master_evolve,
)

L_INVARIANCE_TOL = 1e-10
MAX_EXPECTED_COUNTS = 1_000_000
DEFAULT_EPSILONS = (0.2, 0.1, 0.05, 0.025)


@dataclass(frozen=True)
class ScaledModel:
    """A diffusive model together with its ε-indexed counting approximation."""

    base: MeasurementModel
    epsilon: float
    counting: MeasurementModel

    @property
    def f_values(self) -> np.ndarray:
        return np.array([ch.f for ch in self.base.diffusive], dtype=complex)


def scale_counting_model(base: MeasurementModel, epsilon: float) -> ScaledModel:
    """Build the counting model whose rescaled outputs approximate ``base``.

    Requires constant channel weights ``f_j`` (scheduled weights would need
    time-dependent Kraus factors, which counting channels do not carry).
    """
    base.require_mode("diffusive")
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    for ch in base.diffusive:
        if np.ndim(ch.f) != 0:
            raise ConfigError(
                f"scaled counting needs a constant weight on channel {ch.label}; got a schedule"
            )

    shift = np.zeros((base.dim, base.dim), dtype=complex)
    channels = []
    for ch in base.diffusive:
        f = complex(ch.f)
        kraus = ch.z + (f / epsilon) * np.eye(base.dim)
        channels.append(CountingChannel(kraus=(kraus,), label=ch.label))
        shift += (0.5j / epsilon) * (f * dag(ch.z) - np.conj(f) * ch.z)

    h = base.hamiltonian
    h_eps = h + shift if h.ndim == 2 else h + shift[None, :, :]
    counting = replace(base, hamiltonian=h_eps, diffusive=(), counting=tuple(channels))

    slots = [0] if base.is_static else range(base.grid.steps)
    for cell in slots:
        delta = np.abs(
            liouvillian_matrix(counting, cell) - liouvillian_matrix(base, cell)
        ).max()
        if delta > L_INVARIANCE_TOL:
            raise ContractViolationError(
                f"scaled model changed the a-priori generator by {delta:.3e} on cell {cell} "
                f"(must be epsilon-independent within {L_INVARIANCE_TOL:g})"
            )
    return ScaledModel(base=base, epsilon=epsilon, counting=counting)


def expected_counts(scaled: ScaledModel, rho0: np.ndarray, grid: TimeGrid | None = None) -> float:
    """Expected total number of counts over the horizon, from the master path.

    The a-priori states are ε-independent, so the rate integrand
    ``Tr{R^ε σ(t)}`` is evaluated along the base master evolution.
    """
    grid = grid or scaled.base.grid
    sigmas = master_evolve(scaled.counting, rho0, grid)
    rate_ops = [
        sum(dag(k) @ k for k in ch.kraus) for ch in scaled.counting.counting
    ]
    rates = np.array(
        [sum(float(np.trace(r @ s).real) for r in rate_ops) for s in sigmas]
    )
    return float(np.trapezoid(rates, dx=grid.dt))


def scaled_outputs(record: TrajectoryRecord, scaled: ScaledModel) -> np.ndarray:
    """Per-node rescaled outputs Y^ε_j(t) = ε N_j(t) − |f_j|²(t−t0)/ε."""
    if record.counts is None:
        raise ConfigError("scaled outputs need a counting-mode trajectory record")
    f2 = np.abs(scaled.f_values) ** 2
    elapsed = record.grid - record.grid[0]
    return scaled.epsilon * record.counts - np.outer(elapsed, f2) / scaled.epsilon


def generator_gap(
    base: MeasurementModel,
    epsilon: float,
    k: TestFunction,
    t: float = 0.0,
) -> float:
    """Operator 2-norm distance between the ε-scaled and limiting generators.

    The ε generator uses the scaled test function and the output centering:
    𝒦^ε(k) = ℒ + Σ_j [(e^{iεk_j} − 1)·(Z_j + f_j/ε)·(Z_j + f_j/ε)† − i k_j |f_j|²/ε].
    """
    base.require_mode("diffusive")
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if k.mode != "diffusive":
        raise ConfigError(f"generator gap needs a diffusive test function, got {k.mode!r}")
    grid = base.grid
    cell = min(grid.cell_index(t), k.n_cells - 1)
    kcol = k.values[:, cell].real

    k_limit = characteristic_generator_matrix(base, kcol, cell, "diffusive")
    k_eps = liouvillian_matrix(base, cell).astype(complex)
    eye = np.eye(base.dim**2)
    for j, ch in enumerate(base.diffusive):
        f = complex(ch.f_at(cell))
        kraus = ch.z + (f / epsilon) * np.eye(base.dim)
        k_eps += (np.exp(1j * epsilon * kcol[j]) - 1.0) * sandwich(kraus, dag(kraus))
        k_eps += (-1j * kcol[j] * abs(f) ** 2 / epsilon) * eye
    return float(np.linalg.norm(k_eps - k_limit, 2))


def fit_gap_slope(epsilons: Sequence[float], gaps: Sequence[float]) -> tuple[float, float]:
    """Least-squares fit gap = c·ε through the origin; returns (c, R²)."""
    eps = np.asarray(epsilons, dtype=float)
    gap = np.asarray(gaps, dtype=float)
    c = float(eps @ gap / (eps @ eps))
    resid = gap - c * eps
    total = gap - gap.mean()
    ss_tot = float(total @ total)
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return c, r2


# ---------------------------------------------------------------------------
# scaled-counting ensembles and the sweep report
# ---------------------------------------------------------------------------

@dataclass
class ScaledEnsembleStats:
    """Per-node statistics of Y^ε over a scaled-counting ensemble."""

    times: np.ndarray
    n_traj: int
    y_mean: np.ndarray   # (n_nodes, n_ch)
    y_var: np.ndarray    # (n_nodes, n_ch)
    paths: Optional[np.ndarray] = None  # (n_traj, n_nodes, n_ch) if kept


def scaled_counting_ensemble(
    scaled: ScaledModel,
    rho0: np.ndarray,
    n_traj: int,
    master_seed: int,
    grid: TimeGrid | None = None,
    *,
    keep_paths: bool = False,
    max_expected: float = MAX_EXPECTED_COUNTS,
) -> ScaledEnsembleStats:
    """Simulate the scaled counting model and accumulate Y^ε statistics.

    Trajectory ``i`` uses the stream ``Philox(key=(master_seed, i))``.  The
    expected count load is estimated first and refused above ``max_expected``
    (rates scale like 1/ε², so this guards against runaway requests).
    """
    grid = grid or scaled.base.grid
    load = expected_counts(scaled, rho0, grid)
    if load > max_expected:
        raise ConfigError(
            f"expected {load:.3g} counts per trajectory exceeds the cap {max_expected:.3g}; "
            "increase epsilon or shorten the horizon"
        )
    plan = build_counting_plan(scaled.counting, grid, max_events=int(max(10.0 * load, 1000.0)))
    f2 = np.abs(scaled.f_values) ** 2
    elapsed = grid.times - grid.t0
    center = np.outer(elapsed, f2) / scaled.epsilon

    n_nodes, n_ch = len(grid.times), len(scaled.counting.counting)
    sum_y = np.zeros((n_nodes, n_ch))
    sumsq_y = np.zeros((n_nodes, n_ch))
    paths = np.empty((n_traj, n_nodes, n_ch)) if keep_paths else None
    y0 = np.asarray(rho0, dtype=complex).reshape(-1)
    for traj in range(n_traj):
        rng = np.random.Generator(np.random.Philox(key=[master_seed, traj]))
        raw = run_counting_trajectory_raw(plan, y0, rng, 0)
        status = raw[-1]
        raise_for_status(status, f"scaled trajectory {traj}")
        counts = raw[2]
        y = scaled.epsilon * counts - center
        sum_y += y
        sumsq_y += y**2
        if paths is not None:
            paths[traj] = y

    y_mean = sum_y / n_traj
    denom = max(n_traj - 1, 1)
    y_var = np.maximum(sumsq_y / n_traj - y_mean**2, 0.0) * n_traj / denom
    return ScaledEnsembleStats(
        times=grid.times, n_traj=n_traj, y_mean=y_mean, y_var=y_var, paths=paths
    )


@dataclass
class LimitSweepRow:
    epsilon: float
    gap: float
    mean_err: float
    var_err: float
    n_traj: int


def limit_sweep(
    base: MeasurementModel,
    rho0: np.ndarray,
    k: TestFunction,
    *,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    n_traj: int = 0,
    master_seed: int = 0,
    grid: TimeGrid | None = None,
    diffusive_stats=None,
) -> list[LimitSweepRow]:
    """Per-ε report: generator gap plus (optional) output-statistics errors.

    With ``n_traj > 0`` each ε is simulated and the terminal Y^ε mean and
    variance are compared against the diffusive engine's (``diffusive_stats``
    may pass a precomputed `EnsembleStats`; otherwise one is generated with
    the same trajectory count and seed).
    """
    from .diffusive import diffusive_ensemble

    grid = grid or base.grid
    rows = []
    if n_traj > 0 and diffusive_stats is None:
        diffusive_stats = diffusive_ensemble(base, rho0, n_traj, master_seed, grid)
    for eps in epsilons:
        scaled = scale_counting_model(base, eps)
        gap = generator_gap(base, eps, k, grid.t0)
        mean_err = var_err = float("nan")
        if n_traj > 0:
            stats = scaled_counting_ensemble(scaled, rho0, n_traj, master_seed, grid)
            mean_err = float(np.abs(stats.y_mean[-1] - diffusive_stats.y_mean[-1]).max())
            var_err = float(np.abs(stats.y_var[-1] - diffusive_stats.y_var[-1]).max())
        rows.append(
            LimitSweepRow(epsilon=eps, gap=gap, mean_err=mean_err, var_err=var_err, n_traj=n_traj)
        )
    return rows

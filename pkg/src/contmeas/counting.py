r"""Jump-process engine for counting detection.

The production path is the exact alternation: no-count semigroup segments
(each an exact matrix exponential of the frozen cell generator
:math:`\mathcal{A} = \mathcal{L} - \sum_j \mathcal{J}_j`) interleaved with
normalized jumps :math:`\rho \mapsto \mathcal{J}_j\rho / \mathrm{Tr}`.
Jump times come from survival inversion: draw one uniform ``u`` per segment,
march cells until the unnormalized trace drops below ``u``, bisect inside the
bracketing cell.  This samples the exact waiting-time law independent of the
output-grid resolution.

Alongside the physical state every trajectory tracks the linear-filter
normalization :math:`c(t) = \mathrm{Tr}\,\varphi(t)` (in log form, since it
is an exclusive probability density that under- or overflows for long
records): ``c`` multiplies segment survival factors between jumps and
``tau * Tr{J_j phi}`` at jumps, so a no-count record gives the no-count
probability and an ``m``-count record gives ``tau^m`` times the exclusive
density of the record.  ``tau`` is an arbitrary positive time scale and must
cancel from every physical quantity; tests vary it over decades.

Euler-step forms of the nonlinear filter and of the pure-state unravelling
are provided for verifying the Itô-form equations against the exact engine —
they are not the production integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractViolationError
from .hilbert import (
    DEFAULT_TOL,
    CellPropagator,
    Tolerances,
    dag,
    herm_part,
    require_pure,
    require_state,
)
from .kernels import (
    CountingPlan,
    build_counting_plan,
    eig_decompose_generator,
    raise_for_status,
    run_counting_trajectory_raw,
)
from .model import MeasurementModel, TimeGrid, no_count_matrix, rate_operator


# ---------------------------------------------------------------------------
# record types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CountRealization:
    """An ordered count record ``(t_1, j_1), ..., (t_n, j_n)`` up to a horizon."""

    events: tuple[tuple[float, int], ...]
    horizon: float

    def __post_init__(self):
        last = -math.inf
        for t, j in self.events:
            if not (t > last):
                raise ConfigError(f"count record times must be strictly increasing, got {t} after {last}")
            if t > self.horizon:
                raise ConfigError(f"count record time {t} exceeds horizon {self.horizon}")
            last = t

    def times_for_channel(self, j: int) -> np.ndarray:
        return np.array([t for t, ch in self.events if ch == j])


@dataclass
class TrajectoryRecord:
    """One simulated trajectory sampled on the output grid.

    Shared by the counting and diffusive engines; the count-record fields are
    ``None`` in diffusive mode.  Counting node values are right limits: a jump
    landing exactly on a node is included in that node's counts and state.
    ``log_c`` is exact for arbitrarily long records; ``c_values``
    exponentiates it and may overflow to ``inf`` for extreme realizations
    (e.g. strongly scaled counting models).
    """

    grid: np.ndarray
    mode: str = "counting"
    counts: Optional[np.ndarray] = None        # (n_nodes, n_ch) cumulative per channel
    log_c: Optional[np.ndarray] = None         # (n_nodes,)
    compensator: Optional[np.ndarray] = None   # (n_nodes, n_ch): ∫ <R_j>_s ds
    realization: Optional[CountRealization] = None
    snapshots: Optional[np.ndarray] = None     # (n_snaps, d, d) normalized states
    snapshot_stride: int = 1
    seed: object = None

    @property
    def c_values(self) -> np.ndarray:
        if self.log_c is None:
            raise ValueError("c(t) is tracked by the counting engine only")
        with np.errstate(over="ignore"):
            return np.exp(self.log_c)

    @property
    def snapshot_times(self) -> np.ndarray:
        if self.snapshot_stride <= 0 or self.snapshots is None:
            return np.array([])
        return self.grid[:: self.snapshot_stride][: len(self.snapshots)]

    def martingale(self) -> np.ndarray:
        """Innovations ``M_j(t) = N_j(t) − ∫ <R_j>_s ds`` at the grid nodes."""
        if self.counts is None or self.compensator is None:
            raise ValueError("count-record martingale requires a counting-mode record")
        return self.counts.astype(float) - self.compensator


# ---------------------------------------------------------------------------
# no-count semigroup helpers (shared by the engine-level operations)
# ---------------------------------------------------------------------------

class _NoCountSemigroup:
    """Lazy per-schedule-cell propagators for the no-count generator."""

    def __init__(self, m: MeasurementModel):
        m.require_mode("counting")
        self.m = m
        self.dim = m.dim
        self._cells: dict[int, tuple] = {}
        self._props: dict[int, CellPropagator] = {}

    def _slot(self, cell: int) -> int:
        return 0 if self.m.is_static else cell

    def cell_data(self, cell: int):
        slot = self._slot(cell)
        data = self._cells.get(slot)
        if data is None:
            a = no_count_matrix(self.m, slot)
            lam, v, vinv, ok = eig_decompose_generator(a)
            data = (a, lam, v, vinv, ok)
            self._cells[slot] = data
        return data

    def apply_partial(self, cell: int, y: np.ndarray, sigma: float) -> np.ndarray:
        if sigma == 0.0:
            return y.copy()
        a, lam, v, vinv, ok = self.cell_data(cell)
        if ok:
            return v @ (np.exp(lam * sigma) * (vinv @ y))
        slot = self._slot(cell)
        prop = self._props.get(slot)
        if prop is None:
            prop = CellPropagator(a)
            self._props[slot] = prop
        return prop.apply(y, sigma)

    def pieces(self, t0: float, t1: float):
        """Yield ``(cell, a, b)`` absolute-time pieces split at schedule cells."""
        g = self.m.grid
        eps = 1e-12 * max(1.0, abs(g.t1))
        t = t0
        while t < t1 - eps:
            cell = g.cell_index(t + eps)
            cell_end = g.t0 + (cell + 1) * g.dt
            seg_end = min(t1, cell_end)
            yield cell, t, seg_end
            t = seg_end


def no_jump_propagate(
    m: MeasurementModel,
    phi: np.ndarray,
    t0: float,
    t1: float,
    *,
    semigroup: _NoCountSemigroup | None = None,
    tol: Tolerances = DEFAULT_TOL,
) -> tuple[np.ndarray, float]:
    """Propagate under the no-count semigroup; return ``(phi1, survival)``.

    ``survival = Tr{phi1}/Tr{phi}`` is the probability of seeing no count in
    ``(t0, t1]`` given the (normalized) conditional state ``phi/Tr{phi}``.
    """
    if t1 < t0:
        raise ValueError(f"t1 must be >= t0, got {t0} > {t1}")
    sg = semigroup or _NoCountSemigroup(m)
    phi = np.asarray(phi, dtype=complex)
    tr0 = float(np.trace(phi).real)
    if not tr0 > 0.0:
        raise ContractViolationError(f"no_jump_propagate: input trace {tr0:.3e} not positive")
    y = phi.reshape(-1).copy()
    for cell, a, b in sg.pieces(t0, t1):
        y = sg.apply_partial(cell, y, b - a)
    phi1 = y.reshape(m.dim, m.dim)
    survival = float(np.trace(phi1).real) / tr0
    if survival < -tol.trace or survival > 1.0 + tol.trace:
        raise ContractViolationError(
            f"no-count survival {survival!r} outside [0, 1] beyond tolerance on ({t0}, {t1}]"
        )
    return phi1, survival


def jump_apply(
    m: MeasurementModel,
    rho: np.ndarray,
    t: float,
    j: int,
    *,
    tol: Tolerances = DEFAULT_TOL,
) -> np.ndarray:
    """Normalized post-count state ``J_j rho / Tr{J_j rho}``."""
    m.require_mode("counting")
    ch = m.counting[j]
    out = ch.apply(np.asarray(rho, dtype=complex))
    tr = float(np.trace(out).real)
    if tr <= tol.rate:
        raise ContractViolationError(
            f"jump_apply: channel {j} rate {tr:.3e} below tol_rate at t={t:g} (zero-probability jump)"
        )
    return out / tr


def sample_jump(
    m: MeasurementModel,
    rho: np.ndarray,
    t0: float,
    horizon: float,
    u: float,
    rng,
    *,
    tol: Tolerances = DEFAULT_TOL,
):
    """Invert the survival law from ``t0``; return ``(t*, j*, rho*)`` or ``None``.

    ``u`` is the uniform draw to invert; ``rng`` supplies the independent
    channel-selection draw when a jump occurs before ``horizon``.
    """
    m.require_mode("counting")
    if not (0.0 < u < 1.0):
        raise ValueError(f"u must lie in (0, 1), got {u}")
    require_state(rho, tol, what="sample_jump state")
    sg = _NoCountSemigroup(m)
    tol_time = 1e-10 * max(horizon - t0, 1e-300)
    rate_rows = np.stack([ch.superop()[:: m.dim + 1, :].sum(axis=0) for ch in m.counting])

    y = np.asarray(rho, dtype=complex).reshape(-1).copy()
    for cell, a, b in sg.pieces(t0, horizon):
        y_end = sg.apply_partial(cell, y, b - a)
        w_end = float(y_end[:: m.dim + 1].sum().real)
        if w_end > u:
            y = y_end
            continue
        lo, hi = 0.0, b - a
        while hi - lo > tol_time:
            mid = 0.5 * (lo + hi)
            w_mid = float(sg.apply_partial(cell, y, mid)[:: m.dim + 1].sum().real)
            if w_mid > u:
                lo = mid
            else:
                hi = mid
        s_star = 0.5 * (lo + hi)
        t_star = a + s_star
        y_star = sg.apply_partial(cell, y, s_star)
        rates = np.maximum((rate_rows @ y_star).real, 0.0)
        r_tot = float(rates.sum())
        w_star = float(y_star[:: m.dim + 1].sum().real)
        if r_tot <= tol.rate * max(w_star, 1e-300):
            raise ContractViolationError(
                f"sample_jump: all channel rates below tol_rate at t={t_star:g}"
            )
        v = rng.random() * r_tot
        j = int(np.searchsorted(np.cumsum(rates), v, side="right"))
        j = min(j, len(rates) - 1)
        rho_star = jump_apply(m, y_star.reshape(m.dim, m.dim) / w_star, t_star, j, tol=tol)
        return t_star, j, rho_star
    return None


# ---------------------------------------------------------------------------
# trajectory simulation (exact alternation)
# ---------------------------------------------------------------------------

def simulate_counting_trajectory(
    m: MeasurementModel,
    rho0: np.ndarray,
    grid: TimeGrid | None = None,
    rng=None,
    *,
    tau: float = 1.0,
    snapshot_stride: int = 1,
    tol: Tolerances = DEFAULT_TOL,
    max_events: int = 1_000_000,
    plan: CountingPlan | None = None,
    seed_label: object = None,
) -> TrajectoryRecord:
    """Simulate one trajectory by the exact no-count/jump alternation.

    Ensemble drivers should build one `CountingPlan` and pass it to every
    call; the plan holds the per-cell propagator data that dominates setup
    cost.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    require_state(rho0, tol, what="initial state")
    if rng is None:
        rng = np.random.default_rng()
    if plan is None:
        plan = build_counting_plan(m, grid, tau=tau, tol=tol, max_events=max_events)
    grid = grid or m.grid

    raw = run_counting_trajectory_raw(plan, rho0.reshape(-1), rng, snapshot_stride)
    events_t, events_j, counts, log_c, comp, snaps, status = raw
    raise_for_status(status, "simulate_counting_trajectory")

    snapshots = None
    if snaps is not None and len(snaps):
        snapshots = snaps.reshape(len(snaps), m.dim, m.dim)
    return TrajectoryRecord(
        grid=grid.times,
        counts=counts,
        log_c=log_c,
        compensator=comp,
        realization=CountRealization(
            events=tuple((float(t), int(j)) for t, j in zip(events_t, events_j)),
            horizon=grid.t1,
        ),
        snapshots=snapshots,
        snapshot_stride=snapshot_stride,
        seed=seed_label,
        mode="counting",
    )


# ---------------------------------------------------------------------------
# linear filter replay
# ---------------------------------------------------------------------------

def linear_counting_evolve(
    m: MeasurementModel,
    phi0: np.ndarray,
    realization: CountRealization,
    tau: float = 1.0,
    grid: TimeGrid | None = None,
    *,
    tol: Tolerances = DEFAULT_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically replay a count record through the linear filter.

    Between events ``phi`` follows the no-count semigroup; at an event it is
    replaced by ``tau * J_j phi`` (no renormalization).  Returns the node
    states ``phi(t)`` and ``c(t) = Tr{phi(t)}``.  For a no-event record
    ``c(t)`` is the no-count probability; with ``m`` events it is ``tau^m``
    times the exclusive density of the record.  ``phi/c`` reproduces the
    nonlinear engine's state on the same record.
    """
    m.require_mode("counting")
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    grid = grid or m.grid
    sg = _NoCountSemigroup(m)
    phi0 = np.asarray(phi0, dtype=complex)
    n_ch = len(m.counting)
    for t, j in realization.events:
        if not 0 <= j < n_ch:
            raise ConfigError(f"count record channel {j} out of range (model has {n_ch})")

    times = grid.times
    phis = np.empty((len(times), m.dim, m.dim), dtype=complex)
    c = np.empty(len(times))
    phis[0] = phi0
    c[0] = float(np.trace(phi0).real)
    y = phi0.reshape(-1).copy()
    events = list(realization.events)
    ev_i = 0
    eps = 1e-12 * max(1.0, abs(grid.t1))
    for i in range(grid.steps):
        a, b = times[i], times[i + 1]
        pos = a
        while ev_i < len(events) and events[ev_i][0] <= b + eps and events[ev_i][0] > a + eps:
            t_ev, j_ev = events[ev_i]
            for cell, pa, pb in sg.pieces(pos, min(t_ev, b)):
                y = sg.apply_partial(cell, y, pb - pa)
            y = tau * (m.counting[j_ev].superop() @ y)
            pos = t_ev
            ev_i += 1
        for cell, pa, pb in sg.pieces(pos, b):
            y = sg.apply_partial(cell, y, pb - pa)
        phis[i + 1] = y.reshape(m.dim, m.dim)
        c[i + 1] = float(np.trace(phis[i + 1]).real)
        if c[i + 1] <= 0.0:
            raise ContractViolationError(
                f"linear filter normalization c({times[i+1]:g}) = {c[i+1]:.3e} is not positive "
                "(impossible realization for this model)"
            )
    return phis, c


# ---------------------------------------------------------------------------
# Euler-step verification forms
# ---------------------------------------------------------------------------

def nonlinear_counting_step(
    m: MeasurementModel,
    rho: np.ndarray,
    t: float,
    dt: float,
    dN: Sequence[int],
    *,
    tol: Tolerances = DEFAULT_TOL,
) -> np.ndarray:
    """One explicit Euler step of the nonlinear jump filter, renormalized.

    With all ``dN = 0`` this reproduces the normalized no-count drift to
    O(dt²); with ``dN_j = 1`` it reproduces `jump_apply` to O(dt).
    """
    m.require_mode("counting")
    dN = np.asarray(dN, dtype=int)
    if dN.shape != (len(m.counting),):
        raise ValueError(f"dN must have one entry per observed channel, got shape {dN.shape}")
    if not np.isin(dN, (0, 1)).all() or dN.sum() > 1:
        raise ValueError("dN entries must be 0/1 with at most one count per step")
    rho = np.asarray(rho, dtype=complex)
    from .model import liouvillian_apply

    out = rho + dt * liouvillian_apply(m, rho, t)
    for j, ch in enumerate(m.counting):
        j_rho = ch.apply(rho)
        r = float(np.trace(j_rho).real)
        out -= dt * (j_rho - r * rho)
        if dN[j]:
            if r <= tol.rate:
                raise ContractViolationError(
                    f"nonlinear_counting_step: channel {j} rate {r:.3e} below tol_rate with dN=1"
                )
            out += j_rho / r - rho
    out = herm_part(out)
    tr = float(np.trace(out).real)
    if tr <= 0.0:
        raise ContractViolationError(f"nonlinear_counting_step: trace {tr:.3e} not positive at t={t:g}")
    return out / tr


def _hamiltonian_form(m: MeasurementModel) -> list[np.ndarray]:
    """The single Kraus factors Z_j, requiring a Hamiltonian-only background."""
    m.require_mode("counting")
    if m.dissipators:
        raise ContractViolationError(
            "pure-state unravelling needs a Hamiltonian-only background (no unobserved dissipation)"
        )
    zs = []
    for ch in m.counting:
        if len(ch.kraus) != 1:
            raise ContractViolationError(
                f"pure-state unravelling needs single-factor channels; channel {ch.label} has {len(ch.kraus)}"
            )
        zs.append(ch.kraus[0])
    return zs


def pure_counting_step(
    m: MeasurementModel,
    psi: np.ndarray,
    t: float,
    dt: float,
    dN: Sequence[int],
    *,
    tol: Tolerances = DEFAULT_TOL,
) -> np.ndarray:
    """One Euler step of the pure-state jump unravelling, renormalized."""
    zs = _hamiltonian_form(m)
    dN = np.asarray(dN, dtype=int)
    if dN.shape != (len(zs),) or not np.isin(dN, (0, 1)).all() or dN.sum() > 1:
        raise ValueError("dN entries must be 0/1 per channel with at most one count")
    psi = np.asarray(psi, dtype=complex)
    require_pure(psi, tol)
    h = m.h_at(m.grid.cell_index(t))
    drift = -1j * (h @ psi)
    for z in zs:
        zpsi = z @ psi
        mean_r = float(np.vdot(zpsi, zpsi).real)  # <Z†Z>
        drift += -0.5 * (dag(z) @ zpsi - mean_r * psi)
    out = psi + dt * drift
    for j, z in enumerate(zs):
        if dN[j]:
            zpsi = z @ psi
            mean_r = float(np.vdot(zpsi, zpsi).real)
            if mean_r <= tol.rate:
                raise ContractViolationError(
                    f"pure_counting_step: <Z†Z> = {mean_r:.3e} below tol_rate with dN=1 on channel {j}"
                )
            out += zpsi / math.sqrt(mean_r) - psi
    nrm = float(np.linalg.norm(out))
    if nrm <= 0.0:
        raise ContractViolationError(f"pure_counting_step: vanishing state norm at t={t:g}")
    return out / nrm


# ---------------------------------------------------------------------------
# closed-form conveniences used by tests and the CLI validate mode
# ---------------------------------------------------------------------------

def observed_rates(m: MeasurementModel, rho: np.ndarray) -> np.ndarray:
    """Per-channel ``Tr{R_j rho}`` for the observed counting channels."""
    return np.array([float(np.trace(rate_operator(ch) @ rho).real) for ch in m.counting])

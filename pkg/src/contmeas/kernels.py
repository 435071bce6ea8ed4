r"""Precomputed propagator data and kernel dispatch for the counting engine.

The jump engine spends its life alternating two primitives on vectorized
states: full-cell no-count propagation ``y -> exp(A h) y`` and *partial*
propagation ``y -> exp(A s) y`` for the bisection that locates jump times.
Freezing the generator per schedule cell makes both exact:

* full cells use a dense precomputed ``exp(A h)``;
* partials use the eigendecomposition ``A = V diag(λ) V⁻¹``, so that
  ``exp(A s) y = V (e^{λs} ⊙ (V⁻¹ y))`` at any ``s`` with no fresh expm.

Survival and channel rates along a no-count segment only ever enter through
traces, so the plan also carries the row vectors that turn ``e^{λs}(V⁻¹y)``
into ``Tr`` values in O(d²): one for the trace itself and one per observed
channel for ``Tr{J_j ·}``.

Two interchangeable kernels consume this plan: a compiled Cython inner loop
(built as ``contmeas._countkern``) and a pure-Python mirror in
``contmeas._pykern``.  They draw random numbers in the same order, so a fixed
seed gives the same trajectories on either backend (up to float reassociation
in the linear algebra).  Set ``CONTMEAS_FORCE_PY=1`` to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm as _scipy_expm

from .errors import ConfigError, ContractViolationError
from .hilbert import DEFAULT_TOL, Tolerances
from .model import MeasurementModel, TimeGrid, no_count_matrix, observed_jump_superops

try:  # compiled kernel is optional; the package works without it
    from . import _countkern
except ImportError:  # pragma: no cover - depends on build environment
    _countkern = None

#: Relative reconstruction error above which a cell generator is treated as
#: numerically defective and partial propagation falls back to dense expm.
EIG_RECON_TOL = 1e-9

#: Hard cap on vectorized dimension for the jump engine's dense propagators.
COUNTING_DIM_CAP = 4096


def compiled_available() -> bool:
    return _countkern is not None


def _force_python() -> bool:
    return os.environ.get("CONTMEAS_FORCE_PY", "").strip() not in ("", "0")


def eig_decompose_generator(a: np.ndarray):
    """Eigendecompose a cell generator; flag untrustworthy results.

    Returns ``(lam, V, Vinv, ok)``.  ``ok`` is False when the matrix is
    defective (or close enough that reconstruction degrades), in which case
    callers must propagate with dense exponentials instead.
    """
    try:
        lam, v = np.linalg.eig(a)
        vinv = np.linalg.inv(v)
        recon = (v * lam) @ vinv
        scale = max(1.0, float(np.abs(a).max()))
        ok = bool(np.abs(recon - a).max() <= EIG_RECON_TOL * scale)
    except np.linalg.LinAlgError:
        n = a.shape[0]
        lam = np.zeros(n, dtype=complex)
        v = np.eye(n, dtype=complex)
        vinv = np.eye(n, dtype=complex)
        ok = False
    return lam, v, vinv, ok


@dataclass
class CountingPlan:
    """Frozen per-cell propagator data for one (model, run-grid, tau) triple."""

    dim: int
    n_ch: int
    t0: float
    h: float
    n_cells: int
    tau: float
    cell_slot: np.ndarray  # (n_cells,) int32 -> generator slot
    A: np.ndarray          # (n_slots, d2, d2)
    P: np.ndarray          # (n_slots, d2, d2) exp(A h)
    lam: np.ndarray        # (n_slots, d2)
    V: np.ndarray          # (n_slots, d2, d2)
    Vinv: np.ndarray       # (n_slots, d2, d2)
    tv: np.ndarray         # (n_slots, d2): trace row composed with V
    rrV: np.ndarray        # (n_slots, n_ch, d2): channel-rate rows composed with V
    rate_rows: np.ndarray  # (n_ch, d2)
    J: np.ndarray          # (n_ch, d2, d2) observed jump superops
    slot_ok: np.ndarray    # (n_slots,) bool: eigendecomposition trustworthy
    tol_time: float
    rate_tol: float
    max_events: int

    @property
    def all_ok(self) -> bool:
        return bool(self.slot_ok.all())

    # -- propagation primitives (shared by engine-level operations) ---------

    def apply_full_cell(self, slot: int, y: np.ndarray) -> np.ndarray:
        return self.P[slot] @ y

    def apply_partial(self, slot: int, y: np.ndarray, sigma: float) -> np.ndarray:
        if sigma == 0.0:
            return y.copy()
        if self.slot_ok[slot]:
            return self.V[slot] @ (np.exp(self.lam[slot] * sigma) * (self.Vinv[slot] @ y))
        return _scipy_expm(self.A[slot] * sigma) @ y

    def decay_probes(self, slot: int, y: np.ndarray):
        """Closures evaluating survival and channel rates along ``exp(A s) y``.

        Returns ``(w, rates)`` with ``w(s) = Tr{exp(As) y}`` and ``rates(s)``
        the per-channel values ``Tr{J_j exp(As) y}`` (unnormalized).
        """
        if self.slot_ok[slot]:
            z = self.Vinv[slot] @ y
            tv = self.tv[slot]
            rr = self.rrV[slot]
            lam = self.lam[slot]

            def w(s: float) -> float:
                return float((tv @ (np.exp(lam * s) * z)).real)

            def rates(s: float) -> np.ndarray:
                return (rr @ (np.exp(lam * s) * z)).real

            return w, rates

        a = self.A[slot]
        d = self.dim

        def w_slow(s: float) -> float:
            ys = _scipy_expm(a * s) @ y if s else y
            return float(ys[:: d + 1].sum().real)

        def rates_slow(s: float) -> np.ndarray:
            ys = _scipy_expm(a * s) @ y if s else y
            return (self.rate_rows @ ys).real

        return w_slow, rates_slow


def build_counting_plan(
    m: MeasurementModel,
    grid: TimeGrid | None = None,
    *,
    tau: float = 1.0,
    tol: Tolerances = DEFAULT_TOL,
    max_events: int = 1_000_000,
) -> CountingPlan:
    """Assemble the frozen propagator data for a counting run.

    The run grid defaults to the model's schedule grid.  A different run grid
    is allowed when the model is static, or when it subdivides the schedule
    grid exactly (so every run cell sees one frozen generator).
    """
    m.require_mode("counting")
    grid = grid or m.grid
    d = m.dim
    d2 = d * d
    if d2 > COUNTING_DIM_CAP:
        raise ContractViolationError(
            f"counting engine caps dense propagators at dim²={COUNTING_DIM_CAP}; got {d2}"
        )
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")

    if m.is_static:
        n_slots = 1
        cell_slot = np.zeros(grid.steps, dtype=np.int32)
        slot_cells = [0]
    else:
        if (
            grid.steps % m.grid.steps != 0
            or grid.t0 != m.grid.t0
            or grid.t1 != m.grid.t1
        ):
            raise ConfigError(
                "time-dependent model: run grid must subdivide the schedule grid exactly"
            )
        n_slots = m.grid.steps
        ratio = grid.steps // m.grid.steps
        cell_slot = (np.arange(grid.steps, dtype=np.int32) // ratio).astype(np.int32)
        slot_cells = list(range(n_slots))

    J = observed_jump_superops(m)
    n_ch = J.shape[0]
    rate_rows = np.empty((n_ch, d2), dtype=complex)
    diag_idx = np.arange(d) * (d + 1)
    for j in range(n_ch):
        rate_rows[j] = J[j][diag_idx, :].sum(axis=0)

    h = grid.dt
    A = np.empty((n_slots, d2, d2), dtype=complex)
    P = np.empty_like(A)
    lam = np.empty((n_slots, d2), dtype=complex)
    V = np.empty_like(A)
    Vinv = np.empty_like(A)
    tv = np.empty((n_slots, d2), dtype=complex)
    rrV = np.empty((n_slots, n_ch, d2), dtype=complex)
    slot_ok = np.zeros(n_slots, dtype=bool)

    for s, cell in enumerate(slot_cells):
        a = no_count_matrix(m, cell)
        A[s] = a
        P[s] = _scipy_expm(a * h)
        lam[s], V[s], Vinv[s], slot_ok[s] = eig_decompose_generator(a)
        tv[s] = V[s][diag_idx, :].sum(axis=0)
        rrV[s] = rate_rows @ V[s]

    return CountingPlan(
        dim=d,
        n_ch=n_ch,
        t0=grid.t0,
        h=h,
        n_cells=grid.steps,
        tau=tau,
        cell_slot=cell_slot,
        A=A,
        P=np.ascontiguousarray(P),
        lam=np.ascontiguousarray(lam),
        V=np.ascontiguousarray(V),
        Vinv=np.ascontiguousarray(Vinv),
        tv=np.ascontiguousarray(tv),
        rrV=np.ascontiguousarray(rrV),
        rate_rows=rate_rows,
        J=np.ascontiguousarray(J),
        slot_ok=slot_ok,
        tol_time=1e-10 * (grid.t1 - grid.t0),
        rate_tol=tol.rate,
        max_events=max_events,
    )


# status codes shared by both kernels
STATUS_OK = 0
STATUS_MAX_EVENTS = 1
STATUS_ZERO_RATE = 2
STATUS_SURVIVAL_BOUNDS = 3

_STATUS_MESSAGES = {
    STATUS_MAX_EVENTS: "trajectory exceeded the max_events cap",
    STATUS_ZERO_RATE: "all channel rates below tol_rate at a sampled jump time",
    STATUS_SURVIVAL_BOUNDS: "no-count survival left [−tol, 1+tol]",
}


def raise_for_status(status: int, where: str) -> None:
    if status != STATUS_OK:
        raise ContractViolationError(f"{where}: {_STATUS_MESSAGES.get(status, f'status {status}')}")


def run_counting_trajectory_raw(plan: CountingPlan, y0: np.ndarray, rng, snapshot_stride: int):
    """Dispatch one trajectory to the best available kernel.

    Returns ``(events_t, events_j, counts, log_c, comp, snaps, status)`` as
    raw arrays; `counting.simulate_counting_trajectory` wraps them.
    """
    y0 = np.ascontiguousarray(y0, dtype=complex)
    if _countkern is not None and plan.all_ok and not _force_python():
        return _countkern.run_counting(
            plan.lam,
            plan.V,
            plan.Vinv,
            plan.P,
            plan.J,
            plan.tv,
            plan.rrV,
            plan.cell_slot,
            y0,
            plan.dim,
            plan.h,
            plan.t0,
            plan.tau,
            plan.tol_time,
            plan.rate_tol,
            plan.max_events,
            snapshot_stride,
            rng,
        )
    from . import _pykern

    return _pykern.run_counting(plan, y0, rng, snapshot_stride)

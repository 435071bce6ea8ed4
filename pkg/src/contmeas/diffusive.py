r"""Diffusive-detection engine.

Each observed channel carries an operator ``Z_j`` and a nonzero complex
weight ``f_j(t)``; the recorded output increment is

    dY_j = 2 Re[f_j* <Z_j>_t] dt + dM_j,     dM_j ~ Normal(0, |f_j|² dt),

where ``<Z_j>_t = Tr{Z_j ρ(t)}`` is the conditional mean and the innovations
``M_j`` are martingales under the physical law.  The nonlinear filter reads

    dρ = ℒρ dt + Σ_j |f_j|⁻² [f_j*(Z_j − <Z_j>)ρ + f_j ρ(Z_j† − <Z_j†>)] dM_j,

its linear (unnormalized) companion

    dφ = ℒφ dt + Σ_j [f_j⁻¹ Z_j φ + (f_j*)⁻¹ φ Z_j†] dY_j,

with ``ρ = φ / Tr{φ}`` pathwise.  Everything is integrated by
Euler–Maruyama with per-step Hermitization and exact renormalization; the
continuous equations preserve the trace, so renormalization only removes the
O(dt²) discretization drift.  Positivity is monitored (never silently
projected): the single-step API checks every step, the ensemble driver checks
on a configurable stride because a dense eigenvalue sweep per step dominates
the run time for large batches.

A channel pair ``(Z, f=1), (Z, f=i)`` watches both quadratures of the same
operator; `complexify_channels` builds such pairs and the combined complex
output ``dW = ½(dY₁ + i dY₂)`` then satisfies ``E[dW²]=0``,
``E[|dW|²]=dt/2`` and has conditional mean ``<Z> dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractViolationError
from .hilbert import DEFAULT_TOL, Tolerances, dag, require_pure, require_state
from .counting import TrajectoryRecord
from .model import DiffusiveChannel, MeasurementModel, TimeGrid, liouvillian_apply


# ---------------------------------------------------------------------------
# output records
# ---------------------------------------------------------------------------

@dataclass
class OutputPath:
    """Recorded output increments of one diffusive trajectory.

    ``dY[s, j]`` is the increment over step ``s`` (between grid nodes ``s``
    and ``s+1``) of channel ``j``; ``dM`` holds the innovations actually
    drawn, so ``dY − dM`` is the conditional-drift part.
    """

    grid: np.ndarray   # (steps+1,) node times
    dY: np.ndarray     # (steps, n_ch)
    dM: np.ndarray     # (steps, n_ch)

    @property
    def n_channels(self) -> int:
        return self.dY.shape[1]

    def cumulative(self) -> np.ndarray:
        """Y_j at the grid nodes, Y_j(t0) = 0; shape (steps+1, n_ch)."""
        out = np.zeros((len(self.grid), self.n_channels))
        np.cumsum(self.dY, axis=0, out=out[1:])
        return out

    def martingale(self) -> np.ndarray:
        """M_j at the grid nodes, M_j(t0) = 0; shape (steps+1, n_ch)."""
        out = np.zeros((len(self.grid), self.n_channels))
        np.cumsum(self.dM, axis=0, out=out[1:])
        return out

    def complex_increments(self) -> np.ndarray:
        """Combined increments ``dW_k = ½(dY_{2k} + i dY_{2k+1})``.

        Assumes channels come in quadrature pairs in the order produced by
        `complexify_channels` (and by the stock oscillator model).
        """
        if self.n_channels % 2:
            raise ValueError("complex increments need an even number of channels (quadrature pairs)")
        return 0.5 * (self.dY[:, 0::2] + 1j * self.dY[:, 1::2])


# ---------------------------------------------------------------------------
# single-step operations
# ---------------------------------------------------------------------------

def _f_values(m: MeasurementModel, cell: int) -> np.ndarray:
    return np.array([ch.f_at(cell) for ch in m.diffusive], dtype=complex)


def _check_psd(rho: np.ndarray, t: float, tol: Tolerances) -> None:
    w = np.linalg.eigvalsh(rho)
    if w[0] < -tol.psd * max(float(np.trace(rho).real), 1.0):
        raise ContractViolationError(
            f"state lost positivity at t={t:g} (min eigenvalue {w[0]:.3e}); "
            "retry with dt/10"
        )


def _clip_negative(rho: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues at 0 and renormalize (opt-in repair).

    Callers that enable this must record it in their output metadata; the
    default behaviour everywhere is to fail loudly instead.
    """
    w, v = np.linalg.eigh(rho)
    if w[0] >= 0.0:
        return rho
    w = np.maximum(w, 0.0)
    out = (v * w) @ v.conj().T
    tr = float(np.trace(out).real)
    if tr <= 0.0:
        raise ContractViolationError("state vanished under eigenvalue clipping")
    return out / tr


def diffusive_step(
    m: MeasurementModel,
    rho: np.ndarray,
    t: float,
    dt: float,
    dY: np.ndarray,
    *,
    tol: Tolerances = DEFAULT_TOL,
    check_psd: bool = True,
    clip_eigenvalues: bool = False,
) -> np.ndarray:
    """One Euler–Maruyama step of the nonlinear diffusive filter.

    ``dY`` is the per-channel output increment over ``[t, t+dt)``; the
    innovation is reconstructed internally as ``dY_j − 2Re[f_j*<Z_j>]dt``.
    The result is Hermitized and renormalized exactly.  Positivity failure
    raises (advising a dt/10 retry) unless ``clip_eigenvalues`` opts into
    clipping negative eigenvalues at 0 with renormalization.
    """
    m.require_mode("diffusive")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    rho = np.asarray(rho, dtype=complex)
    dY = np.asarray(dY, dtype=float)
    if dY.shape != (len(m.diffusive),):
        raise ValueError(f"dY must have one entry per diffusive channel, got shape {dY.shape}")
    cell = m.grid.cell_index(t)
    f = _f_values(m, cell)
    out = rho + dt * liouvillian_apply(m, rho, t)
    for j, ch in enumerate(m.diffusive):
        zr = ch.z @ rho
        mean = complex(np.trace(zr))
        dm = dY[j] - 2.0 * (np.conj(f[j]) * mean).real * dt
        out += (
            (np.conj(f[j]) * (zr - mean * rho) + f[j] * (rho @ dag(ch.z) - np.conj(mean) * rho))
            / (abs(f[j]) ** 2)
        ) * dm
    out = 0.5 * (out + out.conj().T)
    tr = float(np.trace(out).real)
    if tr <= 0.0:
        raise ContractViolationError(
            f"diffusive step lost the trace at t={t:g} (Tr = {tr:.3e}); reduce the step size"
        )
    out /= tr
    if clip_eigenvalues:
        out = _clip_negative(out)
    elif check_psd:
        _check_psd(out, t + dt, tol)
    return out


def pure_diffusive_step(
    m: MeasurementModel,
    psi: np.ndarray,
    t: float,
    dt: float,
    dY: np.ndarray,
    *,
    tol: Tolerances = DEFAULT_TOL,
) -> np.ndarray:
    """One Euler–Maruyama step of the pure-state diffusive unravelling.

    Requires a Hamiltonian-only background (no unobserved dissipation); the
    projector onto the result agrees with `diffusive_step` to strong order
    O(dt^1.5) on shared noise.
    """
    m.require_mode("diffusive")
    if m.dissipators:
        raise ContractViolationError(
            "pure-state unravelling needs a Hamiltonian-only background (no unobserved dissipation)"
        )
    psi = np.asarray(psi, dtype=complex)
    require_pure(psi, tol)
    dY = np.asarray(dY, dtype=float)
    cell = m.grid.cell_index(t)
    f = _f_values(m, cell)
    h = m.h_at(cell)
    out = psi - 1j * dt * (h @ psi)
    for j, ch in enumerate(m.diffusive):
        zpsi = ch.z @ psi
        mean = complex(np.vdot(psi, zpsi))
        out -= 0.5 * dt * (
            dag(ch.z) @ zpsi - 2.0 * np.conj(mean) * zpsi + (abs(mean) ** 2) * psi
        )
        dm = dY[j] - 2.0 * (np.conj(f[j]) * mean).real * dt
        out += (1.0 / f[j]) * (zpsi - mean * psi) * dm
    nrm = float(np.linalg.norm(out))
    if nrm <= 0.0:
        raise ContractViolationError(f"pure diffusive step lost the state norm at t={t:g}")
    return out / nrm


# ---------------------------------------------------------------------------
# trajectory drivers
# ---------------------------------------------------------------------------

def _draw_innovations(rng, steps: int, n_ch: int) -> np.ndarray:
    """Standard-normal block for one trajectory (one call, fixed draw order)."""
    return rng.standard_normal((steps, n_ch))


def simulate_diffusive_trajectory(
    m: MeasurementModel,
    rho0: np.ndarray,
    grid: TimeGrid | None = None,
    rng=None,
    *,
    snapshot_stride: int = 1,
    psd_check_stride: int = 100,
    clip_eigenvalues: bool = False,
    tol: Tolerances = DEFAULT_TOL,
    seed_label: object = None,
) -> tuple[TrajectoryRecord, OutputPath]:
    """Simulate one diffusive trajectory on the grid (dt = grid spacing).

    Draws innovations, forms outputs with the conditional drift, and applies
    `diffusive_step`.  Positivity is checked every ``psd_check_stride`` steps
    (0 disables; 1 checks every step); with ``clip_eigenvalues`` the checked
    steps clip instead of raising.
    """
    m.require_mode("diffusive")
    grid = grid or m.grid
    rho = np.asarray(rho0, dtype=complex)
    require_state(rho, tol, what="initial state")
    if rng is None:
        rng = np.random.default_rng()
    steps, dt = grid.steps, grid.dt
    n_ch = len(m.diffusive)
    noise = _draw_innovations(rng, steps, n_ch)
    times = grid.times

    dY = np.empty((steps, n_ch))
    dM = np.empty((steps, n_ch))
    snaps = [rho.copy()] if snapshot_stride > 0 else []
    for s in range(steps):
        t = times[s]
        cell = m.grid.cell_index(t)
        f = _f_values(m, cell)
        means = np.array([complex(np.trace(ch.z @ rho)) for ch in m.diffusive])
        dM[s] = noise[s] * (np.abs(f) * np.sqrt(dt))
        dY[s] = 2.0 * (np.conj(f) * means).real * dt + dM[s]
        check = psd_check_stride > 0 and (s + 1) % psd_check_stride == 0
        rho = diffusive_step(
            m, rho, t, dt, dY[s], tol=tol,
            check_psd=check, clip_eigenvalues=clip_eigenvalues and check,
        )
        if snapshot_stride > 0 and (s + 1) % snapshot_stride == 0:
            snaps.append(rho.copy())

    record = TrajectoryRecord(
        grid=times,
        mode="diffusive",
        snapshots=np.array(snaps) if snaps else None,
        snapshot_stride=snapshot_stride,
        seed=seed_label,
    )
    return record, OutputPath(grid=times, dY=dY, dM=dM)


def simulate_pure_diffusive_trajectory(
    m: MeasurementModel,
    psi0: np.ndarray,
    grid: TimeGrid | None = None,
    rng=None,
    *,
    snapshot_stride: int = 1,
    tol: Tolerances = DEFAULT_TOL,
) -> tuple[np.ndarray, OutputPath]:
    """Simulate the pure-state unravelling; returns state vectors at nodes.

    Uses the same innovation draw order as `simulate_diffusive_trajectory`,
    so the two engines can be driven by one seed for shared-noise comparisons.
    """
    m.require_mode("diffusive")
    grid = grid or m.grid
    psi = np.asarray(psi0, dtype=complex)
    require_pure(psi, tol)
    if rng is None:
        rng = np.random.default_rng()
    steps, dt = grid.steps, grid.dt
    n_ch = len(m.diffusive)
    noise = _draw_innovations(rng, steps, n_ch)
    times = grid.times

    dY = np.empty((steps, n_ch))
    dM = np.empty((steps, n_ch))
    psis = [psi.copy()]
    for s in range(steps):
        t = times[s]
        f = _f_values(m, m.grid.cell_index(t))
        means = np.array([complex(np.vdot(psi, ch.z @ psi)) for ch in m.diffusive])
        dM[s] = noise[s] * (np.abs(f) * np.sqrt(dt))
        dY[s] = 2.0 * (np.conj(f) * means).real * dt + dM[s]
        psi = pure_diffusive_step(m, psi, t, dt, dY[s], tol=tol)
        if snapshot_stride > 0 and (s + 1) % snapshot_stride == 0:
            psis.append(psi.copy())
    return np.array(psis), OutputPath(grid=times, dY=dY, dM=dM)


def linear_diffusive_evolve(
    m: MeasurementModel,
    phi0: np.ndarray,
    path: OutputPath,
    *,
    tol: Tolerances = DEFAULT_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Euler–Maruyama integration of the linear filter along a given dY path.

    Returns node states ``φ(t)`` and ``c(t) = Tr{φ(t)}``; ``φ/c`` matches the
    nonlinear engine on the same path within the discretization tolerance.
    """
    m.require_mode("diffusive")
    phi = np.asarray(phi0, dtype=complex)
    times = path.grid
    steps = len(times) - 1
    if path.dY.shape != (steps, len(m.diffusive)):
        raise ValueError(
            f"path has {path.dY.shape[1]} channels over {path.dY.shape[0]} steps; "
            f"model expects {len(m.diffusive)} channels over {steps}"
        )
    phis = np.empty((steps + 1,) + phi.shape, dtype=complex)
    c = np.empty(steps + 1)
    phis[0], c[0] = phi, float(np.trace(phi).real)
    for s in range(steps):
        t = times[s]
        dt = times[s + 1] - times[s]
        f = _f_values(m, m.grid.cell_index(t))
        out = phi + dt * liouvillian_apply(m, phi, t)
        for j, ch in enumerate(m.diffusive):
            out += ((ch.z @ phi) / f[j] + (phi @ dag(ch.z)) / np.conj(f[j])) * path.dY[s, j]
        phi = 0.5 * (out + out.conj().T)
        phis[s + 1] = phi
        c[s + 1] = float(np.trace(phi).real)
        if c[s + 1] <= 0.0:
            raise ContractViolationError(
                f"linear filter normalization c({times[s+1]:g}) = {c[s+1]:.3e} is not positive"
            )
    return phis, c


# ---------------------------------------------------------------------------
# complexified detection
# ---------------------------------------------------------------------------

def complexify_channels(m: MeasurementModel) -> MeasurementModel:
    """Watch both quadratures of every channel: (Z, f) → (Z, 1), (Z, i).

    The returned model dissipates twice per original channel (two detectors
    on the same operator), which is what makes the combined complex output
    ``dW = ½(dY_re + i dY_im)`` carry the full conditional mean ``<Z> dt``.
    The original weights ``f_j`` are dropped: the pair convention fixes them.
    """
    m.require_mode("diffusive")
    channels = []
    for ch in m.diffusive:
        channels.append(DiffusiveChannel(z=ch.z, f=1.0 + 0.0j, label=f"{ch.label}:re"))
        channels.append(DiffusiveChannel(z=ch.z, f=1.0j, label=f"{ch.label}:im"))
    return replace(m, diffusive=tuple(channels))


# ---------------------------------------------------------------------------
# batched ensemble driver
# ---------------------------------------------------------------------------

@dataclass
class EnsembleStats:
    """Per-node ensemble summaries from a batched diffusive run."""

    times: np.ndarray          # (n_nodes,)
    n_traj: int
    mean_state: np.ndarray     # (n_nodes, d, d) complex
    state_stderr: np.ndarray   # (n_nodes, d, d) real: sqrt((Var Re + Var Im)/n)
    mart_mean: np.ndarray      # (n_nodes, n_ch)
    mart_stderr: np.ndarray    # (n_nodes, n_ch)
    y_mean: np.ndarray         # (n_nodes, n_ch)
    y_var: np.ndarray          # (n_nodes, n_ch) sample variance of Y(t)


class _CellOps:
    """Frozen per-cell operator data for batched stepping.

    The commutator and all anticommutator halves are folded into one
    effective matrix ``G = −iH − ½ΣK†K − ½ΣZ†Z`` so the no-jump part of a
    step is two matmuls, and channels sharing a jump operator (e.g. the two
    quadratures of one field) are merged into a single weighted sandwich.
    """

    def __init__(self, m: MeasurementModel, cell: int):
        self.h = m.h_at(cell)
        mats: list[np.ndarray] = []
        weights: list[float] = []

        def _slot(mat: np.ndarray) -> int:
            for i, known in enumerate(mats):
                if known is mat or np.array_equal(known, mat):
                    return i
            mats.append(np.asarray(mat, dtype=complex))
            weights.append(0.0)
            return len(mats) - 1

        for ch in m.all_kraus_channels():
            for k in ch.kraus:
                weights[_slot(k)] += 1.0
        self.z_slot = []
        for ch in m.diffusive:
            i = _slot(ch.z)
            weights[i] += 1.0
            self.z_slot.append(i)
        self.jump = [(mat, dag(mat), w) for mat, w in zip(mats, weights)]
        g = -1j * self.h.astype(complex)
        for mat, matd, w in self.jump:
            g = g - (0.5 * w) * (matd @ mat)
        self.g = g
        self.gd = dag(g)
        self.f = _f_values(m, cell)


def diffusive_ensemble(
    m: MeasurementModel,
    rho0: np.ndarray,
    n_traj: int,
    master_seed: int,
    grid: TimeGrid | None = None,
    *,
    chunk: int = 512,
    psd_check_stride: int = 0,
    clip_eigenvalues: bool = False,
    tol: Tolerances = DEFAULT_TOL,
) -> EnsembleStats:
    """Run ``n_traj`` trajectories in vectorized chunks and summarize them.

    Trajectory ``i`` consumes exactly the noise stream of
    ``Philox(key=(master_seed, i))`` in the same order as the one-at-a-time
    driver, so every individual trajectory is chunk-size independent; the
    ensemble sums reassociate across chunk boundaries and may differ at
    machine epsilon between chunk sizes.
    """
    m.require_mode("diffusive")
    grid = grid or m.grid
    rho0 = np.asarray(rho0, dtype=complex)
    require_state(rho0, tol, what="initial state")
    d = m.dim
    steps, dt = grid.steps, grid.dt
    n_ch = len(m.diffusive)
    times = grid.times
    n_nodes = steps + 1

    cells = [_CellOps(m, 0)]
    if not m.is_static:
        cells = [_CellOps(m, m.grid.cell_index(t)) for t in times[:-1]]

    sum_state = np.zeros((n_nodes, d, d), dtype=complex)
    sumsq_re = np.zeros((n_nodes, d, d))
    sumsq_im = np.zeros((n_nodes, d, d))
    sum_m = np.zeros((n_nodes, n_ch))
    sumsq_m = np.zeros((n_nodes, n_ch))
    sum_y = np.zeros((n_nodes, n_ch))
    sumsq_y = np.zeros((n_nodes, n_ch))

    def accumulate(node: int, rho_b: np.ndarray, m_b: np.ndarray, y_b: np.ndarray) -> None:
        sum_state[node] += rho_b.sum(axis=0)
        sumsq_re[node] += (rho_b.real**2).sum(axis=0)
        sumsq_im[node] += (rho_b.imag**2).sum(axis=0)
        sum_m[node] += m_b.sum(axis=0)
        sumsq_m[node] += (m_b**2).sum(axis=0)
        sum_y[node] += y_b.sum(axis=0)
        sumsq_y[node] += (y_b**2).sum(axis=0)

    for start in range(0, n_traj, chunk):
        idx = range(start, min(start + chunk, n_traj))
        b = len(idx)
        noise = np.empty((b, steps, n_ch))
        for bi, traj in enumerate(idx):
            rng = np.random.Generator(np.random.Philox(key=[master_seed, traj]))
            noise[bi] = _draw_innovations(rng, steps, n_ch)
        rho = np.broadcast_to(rho0, (b, d, d)).copy()
        rho = 0.5 * (rho + np.conj(np.swapaxes(rho, 1, 2)))
        m_cum = np.zeros((b, n_ch))
        y_cum = np.zeros((b, n_ch))
        accumulate(0, rho, m_cum, y_cum)
        for s in range(steps):
            ops = cells[s if len(cells) > 1 else 0]
            f = ops.f
            dm = noise[:, s, :] * (np.abs(f) * np.sqrt(dt))
            mrho = [mat @ rho for mat, _, _ in ops.jump]
            out = rho + dt * (ops.g @ rho + rho @ ops.gd)
            for (_, matd, w), mr in zip(ops.jump, mrho):
                out += (dt * w) * (mr @ matd)
            drift_y = np.empty((b, n_ch))
            for j in range(n_ch):
                zr = mrho[ops.z_slot[j]]
                # ρZ† = (Zρ)† for the Hermitian ρ kept by the stepper
                zrd = np.conj(np.swapaxes(zr, 1, 2))
                means = np.einsum("bii->b", zr)
                drift_y[:, j] = 2.0 * (np.conj(f[j]) * means).real
                coef = dm[:, j] / (abs(f[j]) ** 2)
                out += coef[:, None, None] * (
                    np.conj(f[j]) * (zr - means[:, None, None] * rho)
                    + f[j] * (zrd - np.conj(means)[:, None, None] * rho)
                )
            dy = drift_y * dt + dm
            out = 0.5 * (out + np.conj(np.swapaxes(out, 1, 2)))
            tr = np.trace(out, axis1=1, axis2=2).real
            if not (tr > 0.0).all():
                bad = int(np.argmin(tr))
                raise ContractViolationError(
                    f"diffusive step lost the trace at t={times[s+1]:g} "
                    f"(trajectory {start + bad}); reduce the step size"
                )
            rho = out / tr[:, None, None]
            if psd_check_stride > 0 and (s + 1) % psd_check_stride == 0:
                w = np.linalg.eigvalsh(rho)
                if (w[:, 0] < -tol.psd).any():
                    if clip_eigenvalues:
                        for bi in np.nonzero(w[:, 0] < 0.0)[0]:
                            rho[bi] = _clip_negative(rho[bi])
                    else:
                        bad = int(np.argmin(w[:, 0]))
                        raise ContractViolationError(
                            f"state lost positivity at t={times[s+1]:g} "
                            f"(trajectory {start + bad}, min eigenvalue {w[bad, 0]:.3e}); "
                            "retry with dt/10"
                        )
            m_cum = m_cum + dm
            y_cum = y_cum + dy
            accumulate(s + 1, rho, m_cum, y_cum)

    n = n_traj
    mean_state = sum_state / n
    var_re = np.maximum(sumsq_re / n - mean_state.real**2, 0.0)
    var_im = np.maximum(sumsq_im / n - mean_state.imag**2, 0.0)
    denom = max(n - 1, 1)
    state_stderr = np.sqrt((var_re + var_im) * n / denom / n)
    mart_mean = sum_m / n
    mart_stderr = np.sqrt(np.maximum(sumsq_m / n - mart_mean**2, 0.0) * n / denom / n)
    y_mean = sum_y / n
    y_var = np.maximum(sumsq_y / n - y_mean**2, 0.0) * n / denom
    return EnsembleStats(
        times=times,
        n_traj=n,
        mean_state=mean_state,
        state_stderr=state_stderr,
        mart_mean=mart_mean,
        mart_stderr=mart_stderr,
        y_mean=y_mean,
        y_var=y_var,
    )


def output_mean_rate(m: MeasurementModel, sigma: np.ndarray, t: float = 0.0) -> np.ndarray:
    """A-priori output drift ``d<Y_j>/dt = Tr{(f_j* Z_j + f_j Z_j†) σ}``."""
    m.require_mode("diffusive")
    cell = m.grid.cell_index(t)
    f = _f_values(m, cell)
    return np.array(
        [
            float(np.trace(np.conj(f[j]) * (ch.z @ sigma) + f[j] * (sigma @ dag(ch.z))).real)
            for j, ch in enumerate(m.diffusive)
        ]
    )

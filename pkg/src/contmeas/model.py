r"""Measurement models and the quantum master equation.

A :class:`MeasurementModel` bundles a Hamiltonian, unobserved dissipation
channels, and one detection family — counting channels (completely positive
jump maps given by Kraus factors) or diffusive channels (pairs ``(Z_j, f_j)``
with :math:`|f_j| > 0`).  From these it derives

* the per-channel rate operators :math:`R_j = \sum_k K_k^\dagger K_k`,
* the full Liouvillian
  :math:`\mathcal{L}\rho = -i[H,\rho] + \sum_j (\mathcal{J}_j\rho
  - \tfrac12\{R_j,\rho\})` (diffusive channels contribute
  :math:`Z\rho Z^\dagger - \tfrac12\{Z^\dagger Z, \rho\}`, which keeps
  :math:`\mathcal{L}` independent of the ``f_j``),
* the no-count generator :math:`\mathcal{A} = \mathcal{L} - \sum_{j\,\rm
  observed} \mathcal{J}_j`,

and propagates the master equation :math:`\dot\sigma = \mathcal{L}\sigma`.

All time dependence is piecewise-constant on the model's ``schedule_grid``:
the Hamiltonian may be a single ``(d, d)`` matrix or a ``(cells, d, d)``
stack, and each diffusive amplitude ``f_j`` may be a scalar or a per-cell
array.  Kraus factors are constant.  Piecewise-constant schedules keep every
deterministic segment an exact matrix exponential.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import serialize
from .errors import ConfigError, ContractViolationError
from .hilbert import (
    DEFAULT_TOL,
    CellPropagator,
    Tolerances,
    dag,
    require_hermitian,
    require_state,
    sandwich,
)


# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 = s_0 < ... < s_steps = t1`` with ``steps`` cells."""

    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"grid.steps must be >= 1, got {self.steps}")
        if not (np.isfinite(self.t0) and np.isfinite(self.t1) and self.t1 > self.t0):
            raise ConfigError(f"grid must satisfy t1 > t0, got t0={self.t0}, t1={self.t1}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.steps + 1)

    def cell_index(self, t: float) -> int:
        """Cell containing ``t`` (clamped; the right endpoint maps to the last cell)."""
        k = int((t - self.t0) / self.dt)
        return min(max(k, 0), self.steps - 1)


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CountingChannel:
    """A completely positive jump map ``rho -> sum_k K_k rho K_k†``.

    ``observed=False`` marks plain dissipation: the channel enters the
    Liouvillian but never produces recorded counts.
    """

    kraus: tuple[np.ndarray, ...]
    label: int = 0
    observed: bool = True

    def __post_init__(self):
        if not self.kraus:
            raise ConfigError(f"counting channel {self.label}: needs at least one Kraus factor")
        ops = tuple(np.asarray(k, dtype=complex) for k in self.kraus)
        d = ops[0].shape[0]
        for k in ops:
            if k.shape != (d, d):
                raise ConfigError(f"counting channel {self.label}: Kraus factors must share shape")
            if not np.isfinite(k).all():
                raise ConfigError(f"counting channel {self.label}: non-finite Kraus entries")
        object.__setattr__(self, "kraus", ops)

    @property
    def dim(self) -> int:
        return self.kraus[0].shape[0]

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """The jump map itself, ``J rho``."""
        out = np.zeros_like(np.asarray(rho, dtype=complex))
        for k in self.kraus:
            out += k @ rho @ dag(k)
        return out

    def superop(self) -> np.ndarray:
        """Dense matrix of the jump map on vec space."""
        d2 = self.dim * self.dim
        out = np.zeros((d2, d2), dtype=complex)
        for k in self.kraus:
            out += sandwich(k, dag(k))
        return out


@dataclass(frozen=True)
class DiffusiveChannel:
    """Detection pair ``(Z, f)`` with ``|f(t)| > 0`` on the whole grid."""

    z: np.ndarray
    f: Any = 1.0 + 0.0j  # complex scalar or per-cell complex array
    label: int = 0

    def __post_init__(self):
        z = np.asarray(self.z, dtype=complex)
        if z.ndim != 2 or z.shape[0] != z.shape[1] or not np.isfinite(z).all():
            raise ConfigError(f"diffusive channel {self.label}: z must be a finite square matrix")
        object.__setattr__(self, "z", z)
        f = self.f
        if np.ndim(f) == 0:
            f = complex(f)
        else:
            f = np.asarray(f, dtype=complex)
        if np.abs(np.atleast_1d(f)).min() <= 0.0:
            raise ConfigError(f"diffusive channel {self.label}: |f| must stay strictly positive")
        object.__setattr__(self, "f", f)

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    def f_at(self, cell: int) -> complex:
        if np.ndim(self.f) == 0:
            return complex(self.f)
        return complex(self.f[cell])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementModel:
    """System + detection description; immutable and shareable across workers."""

    dim: int
    hamiltonian: np.ndarray  # (d, d) or (cells, d, d)
    dissipators: tuple[CountingChannel, ...] = ()
    counting: tuple[CountingChannel, ...] = ()
    diffusive: tuple[DiffusiveChannel, ...] = ()
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 1.0, 100))

    def __post_init__(self):
        h = np.asarray(self.hamiltonian, dtype=complex)
        if h.ndim == 2:
            if h.shape != (self.dim, self.dim):
                raise ConfigError(f"hamiltonian: expected shape {(self.dim,)*2}, got {h.shape}")
        elif h.ndim == 3:
            if h.shape != (self.grid.steps, self.dim, self.dim):
                raise ConfigError(
                    f"hamiltonian schedule: expected {(self.grid.steps, self.dim, self.dim)}, got {h.shape}"
                )
        else:
            raise ConfigError("hamiltonian: expected a matrix or a per-cell stack of matrices")
        if not np.isfinite(h).all():
            raise ConfigError("hamiltonian: non-finite entries")
        for slab in h if h.ndim == 3 else (h,):
            require_hermitian(slab, what="hamiltonian")
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(
            self,
            "dissipators",
            tuple(replace(c, observed=False) for c in self.dissipators),
        )
        object.__setattr__(self, "counting", tuple(self.counting))
        object.__setattr__(self, "diffusive", tuple(self.diffusive))
        for ch in (*self.dissipators, *self.counting):
            if ch.dim != self.dim:
                raise ConfigError(f"counting channel {ch.label}: dimension {ch.dim} != model dim {self.dim}")
        for ch in self.diffusive:
            if ch.dim != self.dim:
                raise ConfigError(f"diffusive channel {ch.label}: dimension {ch.dim} != model dim {self.dim}")
            if np.ndim(ch.f) == 1 and len(ch.f) != self.grid.steps:
                raise ConfigError(
                    f"diffusive channel {ch.label}: f schedule length {len(ch.f)} != grid.steps {self.grid.steps}"
                )

    # -- modes ---------------------------------------------------------------

    @property
    def mode(self) -> str:
        if self.counting and not self.diffusive:
            return "counting"
        if self.diffusive and not self.counting:
            return "diffusive"
        if not self.counting and not self.diffusive:
            return "master"
        return "mixed"

    def require_mode(self, mode: str) -> None:
        """A run uses exactly one detection family; anything else is an error."""
        if self.mode != mode:
            raise ContractViolationError(
                f"model has detection mode {self.mode!r}; this operation needs {mode!r}"
            )

    @property
    def is_static(self) -> bool:
        if self.hamiltonian.ndim == 3:
            return False
        return all(np.ndim(ch.f) == 0 for ch in self.diffusive)

    def n_distinct_cells(self) -> int:
        return 1 if self.is_static else self.grid.steps

    def h_at(self, cell: int) -> np.ndarray:
        h = self.hamiltonian
        return h if h.ndim == 2 else h[cell]

    def all_kraus_channels(self) -> tuple[CountingChannel, ...]:
        return (*self.dissipators, *self.counting)


# ---------------------------------------------------------------------------
# derived maps
# ---------------------------------------------------------------------------

def rate_operator(ch: CountingChannel, t: float = 0.0) -> np.ndarray:
    """``R = sum_k K_k† K_k``; positive semidefinite by construction."""
    out = np.zeros((ch.dim, ch.dim), dtype=complex)
    for k in ch.kraus:
        out += dag(k) @ k
    return out


def diffusive_rate_operator(ch: DiffusiveChannel) -> np.ndarray:
    return dag(ch.z) @ ch.z


def _dissipator_terms(rho: np.ndarray, kraus: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros_like(rho)
    for k in kraus:
        kd = dag(k)
        out += k @ rho @ kd - 0.5 * (kd @ k @ rho + rho @ kd @ k)
    return out


def liouvillian_apply(m: MeasurementModel, rho: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Full a-priori generator applied to one operator."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (m.dim, m.dim):
        raise ValueError(f"state shape {rho.shape} does not match model dim {m.dim}")
    cell = m.grid.cell_index(t)
    h = m.h_at(cell)
    out = -1j * (h @ rho - rho @ h)
    for ch in m.all_kraus_channels():
        out += _dissipator_terms(rho, ch.kraus)
    for ch in m.diffusive:
        out += _dissipator_terms(rho, (ch.z,))
    return out


def liouvillian_matrix(m: MeasurementModel, cell: int = 0) -> np.ndarray:
    """Dense vec-space matrix of the Liouvillian on one schedule cell."""
    d = m.dim
    eye = np.eye(d, dtype=complex)
    h = m.h_at(cell)
    out = -1j * (sandwich(h, eye) - sandwich(eye, h))
    kraus = [k for ch in m.all_kraus_channels() for k in ch.kraus]
    kraus += [ch.z for ch in m.diffusive]
    for k in kraus:
        kdk = dag(k) @ k
        out += sandwich(k, dag(k)) - 0.5 * (sandwich(kdk, eye) + sandwich(eye, kdk))
    return out


def observed_jump_superops(m: MeasurementModel) -> np.ndarray:
    """Stack of vec-space matrices of the observed counting maps, ``(n_ch, d², d²)``."""
    m.require_mode("counting")
    return np.stack([ch.superop() for ch in m.counting])


def no_count_generator(m: MeasurementModel, rho: np.ndarray, t: float = 0.0) -> np.ndarray:
    """``A rho = L rho − sum_observed J_j rho`` (counting mode only)."""
    m.require_mode("counting")
    out = liouvillian_apply(m, rho, t)
    for ch in m.counting:
        out -= ch.apply(rho)
    return out


def no_count_matrix(m: MeasurementModel, cell: int = 0) -> np.ndarray:
    m.require_mode("counting")
    out = liouvillian_matrix(m, cell)
    for ch in m.counting:
        out -= ch.superop()
    return out


# ---------------------------------------------------------------------------
# master equation
# ---------------------------------------------------------------------------

def _split_cells(model_grid: TimeGrid, a: float, b: float):
    """Yield ``(cell, length)`` pieces of [a, b] split at schedule boundaries."""
    if b <= a:
        return
    eps = 1e-12 * max(1.0, abs(model_grid.t1))
    t = a
    while t < b - eps:
        cell = model_grid.cell_index(t + eps)
        cell_end = model_grid.t0 + (cell + 1) * model_grid.dt
        seg_end = min(b, cell_end)
        yield cell, seg_end - t
        t = seg_end


class _PropagatorBank:
    """Per-cell CellPropagators for some generator family, built lazily."""

    def __init__(self, model: MeasurementModel, matrix_fn):
        self._model = model
        self._matrix_fn = matrix_fn
        self._props: dict[int, CellPropagator] = {}

    def at(self, cell: int) -> CellPropagator:
        slot = 0 if self._model.is_static else cell
        prop = self._props.get(slot)
        if prop is None:
            prop = CellPropagator(self._matrix_fn(self._model, slot))
            self._props[slot] = prop
        return prop


def master_evolve(
    m: MeasurementModel,
    rho0: np.ndarray,
    grid: TimeGrid | None = None,
    *,
    tol: Tolerances = DEFAULT_TOL,
    check: bool = True,
) -> np.ndarray:
    """Propagate ``dσ/dt = Lσ`` and return the ``(len(grid)+1, d, d)`` node states.

    Each output node is validated against the state contract (Hermitian, unit
    trace, spectral floor above ``−tol.psd``); a violation raises with the
    offending time, pointing at either a broken model or a too-coarse grid.
    """
    grid = grid or m.grid
    rho0 = np.asarray(rho0, dtype=complex)
    require_state(rho0, tol, what="master_evolve initial state")
    bank = _PropagatorBank(m, liouvillian_matrix)
    times = grid.times
    out = np.empty((len(times), m.dim, m.dim), dtype=complex)
    out[0] = rho0
    y = rho0.reshape(-1).copy()
    for i in range(grid.steps):
        for cell, length in _split_cells(m.grid, times[i], times[i + 1]):
            y = bank.at(cell).apply(y, length)
        out[i + 1] = y.reshape(m.dim, m.dim)
        if check:
            try:
                require_state(out[i + 1], tol, what="master state")
            except ContractViolationError as exc:
                raise ContractViolationError(f"master_evolve at t={times[i+1]:g}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# standard operator sets and example models
# ---------------------------------------------------------------------------

def pauli() -> dict[str, np.ndarray]:
    """Two-level operators in the basis ``(|1>, |0>)`` (excited first)."""
    s0 = np.eye(2, dtype=complex)
    s1 = np.array([[0, 1], [1, 0]], dtype=complex)
    s2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
    s3 = np.array([[1, 0], [0, -1]], dtype=complex)
    sp = np.array([[0, 1], [0, 0]], dtype=complex)  # |1><0|
    sm = np.array([[0, 0], [1, 0]], dtype=complex)  # |0><1|
    return {"s0": s0, "s1": s1, "s2": s2, "s3": s3, "sp": sp, "sm": sm}


def fock_ops(dim: int) -> dict[str, np.ndarray]:
    """Truncated annihilation/creation/number operators on ``dim`` levels."""
    a = np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1).astype(complex)
    return {"a": a, "adag": dag(a), "n": dag(a) @ a}


def coherent_state(dim: int, alpha: complex) -> np.ndarray:
    """Truncated coherent-state vector, renormalized on the cutoff space."""
    n = np.arange(dim)
    log_fact = np.cumsum(np.log(np.maximum(n, 1)))
    amps = np.exp(-0.5 * abs(alpha) ** 2 + n * np.log(complex(alpha)) - 0.5 * log_fact) if alpha != 0 else None
    if alpha == 0:
        v = np.zeros(dim, dtype=complex)
        v[0] = 1.0
        return v
    v = np.asarray(amps, dtype=complex)
    return v / np.linalg.norm(v)


def thermal_state(dim: int, nbar: float) -> np.ndarray:
    """Truncated thermal density matrix with mean occupation ``nbar``."""
    if nbar <= 0:
        rho = np.zeros((dim, dim), dtype=complex)
        rho[0, 0] = 1.0
        return rho
    p = (nbar / (1.0 + nbar)) ** np.arange(dim) / (1.0 + nbar)
    return np.diag(p / p.sum()).astype(complex)


def displacement(dim: int, alpha: complex) -> np.ndarray:
    """Truncated displacement ``exp(alpha a† − alpha* a)``."""
    from scipy.linalg import expm

    ops = fock_ops(dim)
    return expm(alpha * ops["adag"] - np.conj(alpha) * ops["a"])


def twolevel_model(
    omega: float,
    lam_plus: float,
    lam_minus: float,
    lam_one: float,
    grid: TimeGrid | None = None,
) -> MeasurementModel:
    """Two-level atom with unobserved pump/decay and one observed decay channel.

    Unobserved dissipation uses Kraus factors ``sqrt(lam_plus)·σ₊`` and
    ``sqrt(lam_minus)·σ₋``; the observed counting channel is
    ``sqrt(lam_one)·σ₋``.
    """
    p = pauli()
    grid = grid or TimeGrid(0.0, 1.0, 100)
    kraus = []
    if lam_plus > 0:
        kraus.append(np.sqrt(lam_plus) * p["sp"])
    if lam_minus > 0:
        kraus.append(np.sqrt(lam_minus) * p["sm"])
    dissipators = (CountingChannel(kraus=tuple(kraus), label=0),) if kraus else ()
    return MeasurementModel(
        dim=2,
        hamiltonian=0.5 * omega * p["s3"],
        dissipators=dissipators,
        counting=(CountingChannel(kraus=(np.sqrt(lam_one) * p["sm"],), label=1),),
        grid=grid,
    )


def oscillator_model(
    dim: int,
    omega: float,
    lam_down: float,
    lam_up: float,
    eta: complex,
    g: Any = 0.0,
    grid: TimeGrid | None = None,
) -> MeasurementModel:
    """Driven damped oscillator watched through both quadratures of ``η·a``.

    ``H(t) = ω a†a + g(t) a† + g(t)* a``; unobserved thermal channels have
    Kraus factors ``sqrt(2 λ↓)·a`` and ``sqrt(2 λ↑)·a†``; detection is the
    complex-output pair ``(ηa, f=1)``, ``(ηa, f=i)``.  ``g`` may be a scalar
    or a per-cell schedule.
    """
    grid = grid or TimeGrid(0.0, 1.0, 100)
    ops = fock_ops(dim)
    if np.ndim(g) == 0:
        h = omega * ops["n"] + g * ops["adag"] + np.conj(g) * ops["a"]
    else:
        g = np.asarray(g, dtype=complex)
        h = np.stack([omega * ops["n"] + gv * ops["adag"] + np.conj(gv) * ops["a"] for gv in g])
    kraus = []
    if lam_down > 0:
        kraus.append(np.sqrt(2.0 * lam_down) * ops["a"])
    if lam_up > 0:
        kraus.append(np.sqrt(2.0 * lam_up) * ops["adag"])
    dissipators = (CountingChannel(kraus=tuple(kraus), label=0),) if kraus else ()
    z = eta * ops["a"]
    return MeasurementModel(
        dim=dim,
        hamiltonian=h,
        dissipators=dissipators,
        diffusive=(
            DiffusiveChannel(z=z, f=1.0 + 0.0j, label=0),
            DiffusiveChannel(z=z, f=1j, label=1),
        ),
        grid=grid,
    )


# ---------------------------------------------------------------------------
# config documents
# ---------------------------------------------------------------------------

def model_from_config(doc: dict) -> MeasurementModel:
    """Build a model from the JSON-compatible config mapping."""
    if not isinstance(doc, dict):
        raise ConfigError("model: expected a mapping")
    try:
        dim = int(doc["dim"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("model.dim: required positive integer") from None
    if dim < 1:
        raise ConfigError(f"model.dim: must be >= 1, got {dim}")
    gdoc = doc.get("grid")
    if not isinstance(gdoc, dict):
        raise ConfigError("model.grid: required mapping {t0, t1, steps}")
    try:
        grid = TimeGrid(float(gdoc["t0"]), float(gdoc["t1"]), int(gdoc["steps"]))
    except (KeyError, TypeError, ValueError):
        raise ConfigError("model.grid: required fields t0, t1, steps") from None
    if "hamiltonian" not in doc:
        raise ConfigError("model.hamiltonian: required")
    h = serialize.matrix_or_schedule_from_json(doc["hamiltonian"], field="model.hamiltonian")

    def _channels(key: str, observed: bool) -> tuple[CountingChannel, ...]:
        entries = doc.get(key, [])
        if not isinstance(entries, (list, tuple)):
            raise ConfigError(f"model.{key}: expected a list")
        chans = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict) or "kraus" not in entry:
                raise ConfigError(f"model.{key}[{i}]: expected a mapping with a 'kraus' list")
            kraus_docs = entry["kraus"]
            if not isinstance(kraus_docs, (list, tuple)) or not kraus_docs:
                raise ConfigError(f"model.{key}[{i}].kraus: expected a nonempty list of matrices")
            kraus = tuple(
                serialize.matrix_from_json(kd, field=f"model.{key}[{i}].kraus[{k}]")
                for k, kd in enumerate(kraus_docs)
            )
            chans.append(CountingChannel(kraus=kraus, label=int(entry.get("label", i)), observed=observed))
        return tuple(chans)

    diffusive = []
    for i, entry in enumerate(doc.get("diffusive", [])):
        if not isinstance(entry, dict) or "z" not in entry:
            raise ConfigError(f"model.diffusive[{i}]: expected a mapping with 'z'")
        z = serialize.matrix_from_json(entry["z"], field=f"model.diffusive[{i}].z")
        f = serialize.scalar_or_schedule_from_json(
            entry.get("f", [1.0, 0.0]), field=f"model.diffusive[{i}].f"
        )
        diffusive.append(DiffusiveChannel(z=z, f=f, label=int(entry.get("label", i))))

    try:
        return MeasurementModel(
            dim=dim,
            hamiltonian=h,
            dissipators=_channels("dissipators", observed=False),
            counting=_channels("counting", observed=True),
            diffusive=tuple(diffusive),
            grid=grid,
        )
    except ContractViolationError as exc:
        raise ConfigError(str(exc)) from exc


def model_to_config(m: MeasurementModel) -> dict:
    h = m.hamiltonian
    doc: dict[str, Any] = {
        "dim": m.dim,
        "hamiltonian": serialize.matrix_to_json(h)
        if h.ndim == 2
        else [serialize.matrix_to_json(slab) for slab in h],
        "grid": {"t0": m.grid.t0, "t1": m.grid.t1, "steps": m.grid.steps},
    }
    if m.dissipators:
        doc["dissipators"] = [
            {"kraus": [serialize.matrix_to_json(k) for k in ch.kraus], "label": ch.label}
            for ch in m.dissipators
        ]
    if m.counting:
        doc["counting"] = [
            {"kraus": [serialize.matrix_to_json(k) for k in ch.kraus], "label": ch.label}
            for ch in m.counting
        ]
    if m.diffusive:
        doc["diffusive"] = [
            {
                "z": serialize.matrix_to_json(ch.z),
                "f": serialize.scalar_or_schedule_to_json(ch.f),
                "label": ch.label,
            }
            for ch in m.diffusive
        ]
    return doc

r"""Dense complex linear algebra on small Hilbert spaces.

Everything in this package lives on a truncated Hilbert space of dimension
``d`` (two-level systems, Fock spaces cut at some ``n_max``), so operators are
plain dense ``(d, d)`` complex ndarrays and superoperators are ``(d², d²)``
matrices acting on row-major vectorizations.

Conventions
-----------
* ``vec(X)`` stacks rows: ``vec(X)[i*d + j] = X[i, j]``.  Consequently the
  matrix of the map :math:`X \mapsto A X B` is ``kron(A, B.T)``.
* A "generator" is either a dense ``(d², d²)`` matrix or a callable
  ``Operator -> Operator``; callables are converted once via
  :func:`superop_matrix`.

The propagation helpers implement one policy in one place: exact
scaling-and-squaring for small vectorized dimensions, fixed-step RK4 with
``‖G‖·h ≤ 0.1`` otherwise.  Engines that reuse a frozen generator many times
should hold a :class:`CellPropagator`, which caches the exact exponential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.linalg import expm as _scipy_expm

from .errors import ContractViolationError

Array = np.ndarray
GeneratorLike = Union[Array, Callable[[Array], Array]]

#: Largest vectorized dimension for which expm_propagate defaults to the
#: exact matrix exponential (d² ≤ 256, i.e. Hilbert dimension ≤ 16).
EXPM_DIM_CAP = 256

#: Largest vectorized dimension for which CellPropagator builds the exact
#: exponential; beyond this it falls back to RK4 substeps.
CELL_EXPM_DIM_CAP = 4096

#: RK4 substep control: substeps are chosen so that ‖G‖₁ · h ≤ RK4_NORM_CAP.
RK4_NORM_CAP = 0.1


@dataclass(frozen=True)
class Tolerances:
    """Default numerical tolerances; ``psd`` is relative to the trace."""

    herm: float = 1e-9
    trace: float = 1e-8
    psd: float = 1e-7
    rate: float = 1e-14


DEFAULT_TOL = Tolerances()


# ---------------------------------------------------------------------------
# elementary operator algebra
# ---------------------------------------------------------------------------

def dag(x: Array) -> Array:
    """Conjugate transpose."""
    return np.asarray(x).conj().T


def comm(a: Array, b: Array) -> Array:
    """Commutator ``[a, b]``."""
    return a @ b - b @ a


def acomm(a: Array, b: Array) -> Array:
    """Anticommutator ``{a, b}``."""
    return a @ b + b @ a


def herm_part(x: Array) -> Array:
    """Hermitian part ``(x + x†)/2``."""
    return 0.5 * (x + dag(x))


def herm_defect(x: Array) -> float:
    """Largest entrywise deviation of ``x`` from Hermiticity."""
    return float(np.abs(x - dag(x)).max()) if x.size else 0.0


def require_hermitian(x: Array, tol: float = DEFAULT_TOL.herm, what: str = "operator") -> None:
    """Raise :class:`ContractViolationError` if ``x`` is not Hermitian within ``tol``.

    The tolerance is applied relative to ``max(1, |x|_max)`` so large operators
    are not penalized for benign rounding.
    """
    scale = max(1.0, float(np.abs(x).max())) if x.size else 1.0
    defect = herm_defect(x)
    if defect > tol * scale:
        raise ContractViolationError(
            f"{what} is not Hermitian: defect {defect:.3e} exceeds {tol:.1e} (scale {scale:.3g})"
        )


def spectral_floor(x: Array, tol_herm: float = DEFAULT_TOL.herm) -> float:
    """Smallest eigenvalue of the Hermitized ``(x + x†)/2``.

    Used as the positivity monitor for state matrices.  Rejects inputs that
    are not Hermitian within ``tol_herm`` to begin with — a non-Hermitian
    "state" is a bug upstream, not something to paper over.
    """
    x = np.asarray(x)
    require_hermitian(x, tol_herm, what="spectral_floor input")
    return float(np.linalg.eigvalsh(herm_part(x)).min())


def trace_distance(a: Array, b: Array) -> float:
    """Trace distance ``½‖a − b‖₁`` for Hermitian ``a``, ``b``."""
    diff = herm_part(np.asarray(a) - np.asarray(b))
    return 0.5 * float(np.abs(np.linalg.eigvalsh(diff)).sum())


def purity(rho: Array) -> float:
    """``Tr{ρ²}`` (real part; imaginary dust discarded)."""
    return float(np.trace(rho @ rho).real)


def normalize(rho: Array) -> Array:
    """Divide by the trace.  Raises if the trace is not positive."""
    tr = complex(np.trace(rho)).real
    if not tr > 0.0:
        raise ContractViolationError(f"cannot normalize: trace {tr:.3e} is not positive")
    return rho / tr


def require_state(
    rho: Array,
    tol: Tolerances = DEFAULT_TOL,
    *,
    normalized: bool = True,
    what: str = "state",
) -> None:
    """Check the density-matrix contract: Hermitian, unit trace, PSD.

    ``psd`` is enforced relative to the trace; unnormalized positive matrices
    (linear-filter states) pass with ``normalized=False``.
    """
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ContractViolationError(f"{what} is not a square matrix: shape {rho.shape}")
    if not np.isfinite(rho).all():
        raise ContractViolationError(f"{what} contains non-finite entries")
    require_hermitian(rho, tol.herm, what=what)
    tr = float(np.trace(rho).real)
    if normalized and abs(tr - 1.0) > tol.trace:
        raise ContractViolationError(f"{what} trace {tr!r} deviates from 1 beyond {tol.trace:.1e}")
    floor = float(np.linalg.eigvalsh(herm_part(rho)).min())
    if floor < -tol.psd * max(abs(tr), 1e-300):
        raise ContractViolationError(
            f"{what} has negative eigenvalue {floor:.3e} beyond tol_psd*trace = {tol.psd * tr:.3e}"
        )


def require_pure(psi: Array, tol: Tolerances = DEFAULT_TOL, what: str = "pure state") -> None:
    """Check a state vector is normalized within ``tol.trace``."""
    psi = np.asarray(psi)
    nrm = float(np.linalg.norm(psi))
    if abs(nrm - 1.0) > tol.trace:
        raise ContractViolationError(f"{what} norm {nrm!r} deviates from 1 beyond {tol.trace:.1e}")


# ---------------------------------------------------------------------------
# vectorization and superoperators
# ---------------------------------------------------------------------------

def vec(x: Array) -> Array:
    """Row-major vectorization."""
    return np.asarray(x).reshape(-1)


def unvec(y: Array, dim: int) -> Array:
    """Inverse of :func:`vec`."""
    return np.asarray(y).reshape(dim, dim)


def left_mult(a: Array) -> Array:
    """Matrix of ``X -> a X`` on vec space."""
    return np.kron(a, np.eye(a.shape[0], dtype=complex))


def right_mult(b: Array) -> Array:
    """Matrix of ``X -> X b`` on vec space."""
    return np.kron(np.eye(b.shape[0], dtype=complex), b.T)


def sandwich(a: Array, b: Array) -> Array:
    """Matrix of ``X -> a X b`` on vec space."""
    return np.kron(a, b.T)


def superop_matrix(apply_fn: Callable[[Array], Array], dim: int) -> Array:
    """Dense matrix of a linear map on operators, built column by column."""
    d2 = dim * dim
    mat = np.empty((d2, d2), dtype=complex)
    basis = np.zeros(d2, dtype=complex)
    for k in range(d2):
        basis[k] = 1.0
        mat[:, k] = apply_fn(basis.reshape(dim, dim)).reshape(-1)
        basis[k] = 0.0
    return mat


def trace_row(dim: int) -> Array:
    """Row vector ``r`` with ``r @ vec(X) = Tr X``."""
    r = np.zeros(dim * dim, dtype=complex)
    r[:: dim + 1] = 1.0
    return r


def _as_matrix(generator: GeneratorLike, dim: int) -> Array:
    if callable(generator):
        return superop_matrix(generator, dim)
    g = np.asarray(generator, dtype=complex)
    if g.shape != (dim * dim, dim * dim):
        raise ValueError(f"generator shape {g.shape} does not match dim {dim} (expect {(dim*dim,)*2})")
    return g


def op_norm_1(g: Array) -> float:
    """Induced 1-norm (max column abs sum); cheap substep control."""
    return float(np.abs(g).sum(axis=0).max()) if g.size else 0.0


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def _rk4_apply(g: Array, y: Array, dt: float, n_steps: int) -> Array:
    h = dt / n_steps
    for _ in range(n_steps):
        k1 = g @ y
        k2 = g @ (y + 0.5 * h * k1)
        k3 = g @ (y + 0.5 * h * k2)
        k4 = g @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def rk4_substeps(norm: float, dt: float) -> int:
    """Substep count so that ``norm * (dt / n) ≤ RK4_NORM_CAP``."""
    if norm <= 0.0 or dt <= 0.0:
        return 1
    return max(1, int(math.ceil(norm * dt / RK4_NORM_CAP)))


def expm_propagate(
    generator: GeneratorLike,
    x: Array,
    dt: float,
    *,
    method: str | None = None,
) -> Array:
    """Apply ``exp(dt · generator)`` to the operator ``x``.

    Policy (``method=None``): exact scaling-and-squaring on the vectorized
    representation when ``dim² ≤ 256``, otherwise classic RK4 with substeps
    capped by ``‖G‖₁·h ≤ 0.1``.  Pass ``method="expm"`` or ``"rk4"`` to force
    a branch (engines use ``"expm"`` with caching when they need exactness at
    larger dimensions).
    """
    x = np.asarray(x, dtype=complex)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"x must be square, got shape {x.shape}")
    if dt < 0.0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    if dt == 0.0:
        return x.copy()
    dim = x.shape[0]
    g = _as_matrix(generator, dim)
    if method is None:
        method = "expm" if dim * dim <= EXPM_DIM_CAP else "rk4"
    if method == "expm":
        y = _scipy_expm(g * dt) @ x.reshape(-1)
    elif method == "rk4":
        y = _rk4_apply(g, x.reshape(-1), dt, rk4_substeps(op_norm_1(g), dt))
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.isfinite(y).all():
        raise ContractViolationError(
            f"non-finite result in expm_propagate (dt={dt!r}, method={method})"
        )
    return y.reshape(dim, dim)


class CellPropagator:
    """Reusable action of ``exp(s·G)`` for one frozen generator.

    Exact exponentials are cached per distinct ``s`` (a handful of values in
    practice: the cell width and a few partial widths).  Above
    ``CELL_EXPM_DIM_CAP`` vectorized dimensions the exact path is refused and
    RK4 substeps are used instead, so Fock-space workloads stay bounded.
    """

    def __init__(self, g: Array):
        self.g = np.ascontiguousarray(g, dtype=complex)
        self._cache: dict[float, Array] = {}
        self._norm = op_norm_1(self.g)
        self.exact = self.g.shape[0] <= CELL_EXPM_DIM_CAP

    def matrix(self, dt: float) -> Array:
        """Dense ``exp(dt·G)`` (only meaningful on the exact path)."""
        if not self.exact:
            raise ContractViolationError(
                f"exact propagator refused at vectorized dim {self.g.shape[0]} > {CELL_EXPM_DIM_CAP}"
            )
        p = self._cache.get(dt)
        if p is None:
            p = _scipy_expm(self.g * dt)
            self._cache[dt] = p
        return p

    def apply(self, y: Array, dt: float) -> Array:
        if dt == 0.0:
            return y.copy()
        if self.exact:
            out = self.matrix(dt) @ y
        else:
            out = _rk4_apply(self.g, y, dt, rk4_substeps(self._norm, dt))
        if not np.isfinite(out).all():
            raise ContractViolationError(f"non-finite result propagating a cell (dt={dt!r})")
        return out

r"""Closed-form references used as ground truth by the test suite.

Two families:

* **Two-level emitter** with decay rates λ₋ (unobserved), λ₁ (detected) and
  pump λ₊.  Between counts the unnormalized filter state is parametrized by
  ground/excited weights (π₀, π₁) and coherence ζ:

      π̇₀ = −λ₊π₀ + λ₋π₁,   π̇₁ = λ₊π₀ − (λ₋+λ₁)π₁,   ζ̇ = −(iω+κ)ζ,

  with κ = ½(λ₊+λ₋+λ₁); a detected count resets (π₀,π₁,ζ) ← (π₁,0,0)
  (jump factor normalized by the detection rate, i.e. time scale τ = 1/λ₁).
  For a pure-decay emitter (λ₊=0) the exclusive probability densities are
  elementary: no count in (0,t] has probability
  π₀(0) + (λ₋+λ₁e^{−2κt})π₁(0)/(2κ), one count at t₁ has density
  λ₁e^{−2κt₁}π₁(0), and two or more counts are impossible.

* **Driven damped oscillator** watched through both quadratures of ``η·a``
  with thermal rates λ↓, λ↑ and Γ = 2(|η|² + λ↓ − λ↑) > 0.
  Gaussian states stay Gaussian: the characteristic functional is
  Φ_t = exp[−h(t)] where (b, c, d, f, h) solve the linear system

      ḃ = −(iω+Γ/2)b + iκ*d + iκf − ig,
      ċ = −(iω+Γ/2)c − iκ*d − iκf − ig,
      ḋ = −(2iω+Γ)d,   ḟ = −Γf + 2λ↑,
      ḣ = −iκ*b − iκc* + ½|κ/η|²,

  with b(0)=c(0)=α₀, d(0)=μ₀, f(0)=ν₀, h(0)=0, and the conditional state is
  Gaussian with mean ⟨a⟩_t, pair moment μ(t) and number variance ν(t):

      d⟨a⟩ + [(iω+Γ/2)⟨a⟩ + ig]dt = 2|η|²[μ(dW*−⟨a⟩*dt) + ν(dW−⟨a⟩dt)],
      μ̇ + (2iω+Γ)μ = −4|η|²μν,
      ν̇ + Γν = −2|η|²(|μ|²+ν²) + 2λ↑,

  driven by the complex output dW with ⟨dW⟩ = ⟨a⟩dt and |dW|² = dt/(2|η|²).
  With μ ≡ 0 the ν equation is a Riccati equation whose stable stationary
  point is ν∞ = 4λ↑ / (Γ + sqrt(Γ² + 16|η|²λ↑)).

Conventions shared with the engine: the stock oscillator model's channel
pair is (Z=ηa, f=1), (Z=ηa, f=i), so the engine-level complex test function
κ_eng (per pair) maps to this module's κ = η*·κ_eng, and the engine output
dW_eng = ½(dY₁+idY₂) maps to dW = dW_eng/η.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, ContractViolationError
from .counting import CountRealization
from .diffusive import OutputPath
from .model import TimeGrid

NU_NEGATIVE_TOL = 1e-12


# ---------------------------------------------------------------------------
# two-level emitter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwoLevelParams:
    omega: float
    lam_plus: float
    lam_minus: float
    lam_one: float

    def __post_init__(self):
        for name in ("lam_plus", "lam_minus", "lam_one"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.lam_one <= 0:
            raise ConfigError("lam_one must be positive (no detection channel otherwise)")

    @property
    def kappa(self) -> float:
        return 0.5 * (self.lam_plus + self.lam_minus + self.lam_one)

    @property
    def alpha(self) -> float:
        return self.lam_minus - self.lam_plus


@dataclass(frozen=True)
class TwoLevelFilterState:
    """Unnormalized filter state (π₀, π₁, ζ); the physical state is matrix/c."""

    pi0: float
    pi1: float
    zeta: complex = 0.0

    def __post_init__(self):
        if self.pi0 < 0 or self.pi1 < 0:
            raise ConfigError(f"weights must be nonnegative, got ({self.pi0}, {self.pi1})")
        if self.c <= 0:
            raise ConfigError("total weight pi0 + pi1 must be positive")
        if abs(self.zeta) ** 2 > 4.0 * self.pi0 * self.pi1 * (1.0 + 1e-9) + 1e-15:
            raise ConfigError(
                f"coherence |zeta|={abs(self.zeta):.3e} violates positivity "
                f"(needs |zeta|^2 <= 4 pi0 pi1 = {4*self.pi0*self.pi1:.3e})"
            )

    @property
    def c(self) -> float:
        return self.pi0 + self.pi1

    def as_matrix(self, normalized: bool = True) -> np.ndarray:
        """2×2 matrix in the (excited, ground) basis."""
        m = np.array(
            [[self.pi1, 0.5 * self.zeta], [0.5 * np.conj(self.zeta), self.pi0]],
            dtype=complex,
        )
        return m / self.c if normalized else m


def _pi_generator(p: TwoLevelParams) -> np.ndarray:
    return np.array(
        [[-p.lam_plus, p.lam_minus], [p.lam_plus, -(p.lam_minus + p.lam_one)]]
    )


def _pi_flow(p: TwoLevelParams, pi0: float, pi1: float, dt: float) -> tuple[float, float]:
    """Exact between-count flow of (π₀, π₁) via the 2×2 exponential."""
    from scipy.linalg import expm

    v = expm(_pi_generator(p) * dt) @ np.array([pi0, pi1])
    return float(v[0]), float(v[1])


def twolevel_filter_evolve(
    p: TwoLevelParams,
    s0: TwoLevelFilterState,
    realization: CountRealization,
    grid: TimeGrid,
) -> list[TwoLevelFilterState]:
    """Exact piecewise filter solution along a count record, at grid nodes.

    Between counts (π₀, π₁) follows the 2×2 linear system and
    ζ(t) = e^{−(iω+κ)(t−t_last)} ζ; each count resets (π₀,π₁,ζ) ← (π₁,0,0).
    A count landing exactly on a node is applied before that node is
    recorded (right-limit convention, matching the trajectory engine).
    No-count weight decay makes this an unnormalized (linear-filter) state;
    node values correspond to the engine run with τ = 1/λ₁.
    """
    events = list(realization.events)
    states: list[TwoLevelFilterState] = [s0]
    pi0, pi1, zeta = s0.pi0, s0.pi1, complex(s0.zeta)
    pos = grid.t0
    ei = 0
    eps = 1e-12 * max(1.0, abs(grid.t1))
    for node in range(1, grid.steps + 1):
        t_node = grid.times[node]
        while ei < len(events) and events[ei][0] <= t_node + eps:
            t_ev, _ = events[ei]
            pi0, pi1 = _pi_flow(p, pi0, pi1, t_ev - pos)
            pi0, pi1, zeta = pi1, 0.0, 0.0
            pos = t_ev
            ei += 1
        if t_node > pos:
            pi0, pi1 = _pi_flow(p, pi0, pi1, t_node - pos)
            zeta *= np.exp(-(1j * p.omega + p.kappa) * (t_node - pos))
            pos = t_node
        states.append(TwoLevelFilterState(pi0=max(pi0, 0.0), pi1=max(pi1, 0.0), zeta=zeta))
    return states


def pure_decay_epd(
    p: TwoLevelParams,
    pi1_0: float,
    t: float,
    t1: Optional[float] = None,
    m: Optional[int] = None,
) -> float:
    """Exclusive probability densities of the pure-decay emitter (λ₊ = 0).

    With ``m >= 2`` returns 0 (at most one count is ever possible); with
    ``t1`` given returns the one-count density at ``t1 ∈ (0, t]``; otherwise
    returns the no-count probability over ``(0, t]``.  ``pi1_0`` is the
    initial excited population (π₀(0) = 1 − π₁(0), normalized start).
    """
    if p.lam_plus != 0.0:
        raise ConfigError(f"pure-decay densities need lam_plus = 0, got {p.lam_plus}")
    if not 0.0 <= pi1_0 <= 1.0:
        raise ConfigError(f"initial excited population must lie in [0, 1], got {pi1_0}")
    if m is not None and m >= 2:
        return 0.0
    two_kappa = 2.0 * p.kappa
    if t1 is None:
        pi0_0 = 1.0 - pi1_0
        return pi0_0 + (p.lam_minus + p.lam_one * math.exp(-two_kappa * t)) * pi1_0 / two_kappa
    if not 0.0 < t1 <= t:
        raise ConfigError(f"count time t1={t1} must lie in (0, t={t}]")
    return p.lam_one * math.exp(-two_kappa * t1) * pi1_0


# ---------------------------------------------------------------------------
# oscillator: parameters and Gaussian posterior
# ---------------------------------------------------------------------------

GSchedule = Union[complex, Callable[[float], complex]]


@dataclass(frozen=True)
class OscillatorParams:
    omega: float
    lam_down: float
    lam_up: float
    eta: complex
    g: GSchedule = 0.0

    def __post_init__(self):
        if self.lam_down < 0 or self.lam_up < 0:
            raise ConfigError("thermal rates must be nonnegative")
        if self.gamma <= 0:
            raise ConfigError(
                f"Gamma = 2(|eta|^2 + lam_down - lam_up) = {self.gamma:g} must be strictly positive"
            )

    @property
    def gamma(self) -> float:
        return 2.0 * (abs(self.eta) ** 2 + self.lam_down - self.lam_up)

    def g_at(self, t: float) -> complex:
        return complex(self.g(t)) if callable(self.g) else complex(self.g)


@dataclass(frozen=True)
class GaussianPosterior:
    """Conditional Gaussian state: mean ⟨a⟩, pair moment μ, number variance ν."""

    mean: complex
    mu: complex = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if self.nu < -NU_NEGATIVE_TOL:
            raise ConfigError(f"nu must be nonnegative, got {self.nu}")

    def physicality_defect(self) -> float:
        """|μ|² − ν(ν+1); positive values flag an unphysical covariance."""
        return abs(self.mu) ** 2 - self.nu * (self.nu + 1.0)


def riccati_stationary(p: OscillatorParams) -> float:
    """Stable stationary point of the ν equation (μ = 0 branch)."""
    if p.eta == 0:
        raise ConfigError("stationary variance needs a detection channel (eta != 0)")
    eta2 = abs(p.eta) ** 2
    return 4.0 * p.lam_up / (p.gamma + math.sqrt(p.gamma**2 + 16.0 * eta2 * p.lam_up))


def riccati_residual(p: OscillatorParams, nu: float) -> float:
    """RHS of the stationary condition: −Γν − 2|η|²ν² + 2λ↑."""
    return -p.gamma * nu - 2.0 * abs(p.eta) ** 2 * nu**2 + 2.0 * p.lam_up


def _mu_nu_rhs(p: OscillatorParams, mu: complex, nu: float) -> tuple[complex, float]:
    eta2 = abs(p.eta) ** 2
    dmu = -(2j * p.omega + p.gamma) * mu - 4.0 * eta2 * mu * nu
    dnu = -p.gamma * nu - 2.0 * eta2 * (abs(mu) ** 2 + nu**2) + 2.0 * p.lam_up
    return dmu, dnu


def riccati_posterior_evolve(
    p: OscillatorParams,
    g0: GaussianPosterior,
    dw: Optional[np.ndarray],
    grid: TimeGrid,
) -> list[GaussianPosterior]:
    """Conditional Gaussian moments at the grid nodes.

    ``dw`` holds the complex output increments per step in the ⟨dW⟩=⟨a⟩dt
    normalization (engine paths: ``oscillator_dw``); ``None`` freezes the
    output at its conditional mean, making the mean evolution deterministic.
    (μ, ν) are integrated by classical RK4 — they never depend on the noise —
    and the mean by Euler–Maruyama.
    """
    dt = grid.dt
    if dw is not None:
        dw = np.asarray(dw, dtype=complex)
        if dw.shape != (grid.steps,):
            raise ConfigError(f"dw must have one increment per step ({grid.steps}), got {dw.shape}")
    eta2 = abs(p.eta) ** 2
    out = [g0]
    mean, mu, nu = complex(g0.mean), complex(g0.mu), float(g0.nu)
    for s in range(grid.steps):
        t = grid.times[s]
        innovation = (dw[s] - mean * dt) if dw is not None else 0.0
        gain_mu, gain_nu = mu, nu
        mean = mean + (
            -(1j * p.omega + 0.5 * p.gamma) * mean - 1j * p.g_at(t)
        ) * dt + 2.0 * eta2 * (gain_mu * np.conj(innovation) + gain_nu * innovation)

        k1 = _mu_nu_rhs(p, mu, nu)
        k2 = _mu_nu_rhs(p, mu + 0.5 * dt * k1[0], nu + 0.5 * dt * k1[1])
        k3 = _mu_nu_rhs(p, mu + 0.5 * dt * k2[0], nu + 0.5 * dt * k2[1])
        k4 = _mu_nu_rhs(p, mu + dt * k3[0], nu + dt * k3[1])
        mu = mu + dt * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0
        nu = nu + dt * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0
        if nu < -1e-9:
            raise ContractViolationError(f"nu went negative ({nu:.3e}) at t={grid.times[s+1]:g}")
        nu = max(nu, 0.0)
        out.append(GaussianPosterior(mean=mean, mu=mu, nu=nu))
    return out


def oscillator_dw(path: OutputPath, eta: complex, pair: int = 0) -> np.ndarray:
    """Engine output path → complex increments with ⟨dW⟩ = ⟨a⟩dt.

    The engine channel pair measures Z = η·a with weights (1, i), so its
    combined increment ½(dY_re + i dY_im) must be divided by η.
    """
    return path.complex_increments()[:, pair] / eta


# ---------------------------------------------------------------------------
# oscillator: characteristic functional and a-priori moments
# ---------------------------------------------------------------------------

@dataclass
class OscillatorCharacteristic:
    """Φ and the Gaussian coefficient paths on the grid nodes."""

    times: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    f: np.ndarray
    h: np.ndarray

    @property
    def phi_path(self) -> np.ndarray:
        return np.exp(-self.h)

    @property
    def phi(self) -> complex:
        return complex(self.phi_path[-1])


def _coeff_rhs(p: OscillatorParams, kap: complex, g: complex, y: np.ndarray) -> np.ndarray:
    b, c, d, f, h = y
    decay = 1j * p.omega + 0.5 * p.gamma
    eta2 = abs(p.eta) ** 2
    return np.array(
        [
            -decay * b + 1j * np.conj(kap) * d + 1j * kap * f - 1j * g,
            -decay * c - 1j * np.conj(kap) * d - 1j * kap * f - 1j * g,
            -(2j * p.omega + p.gamma) * d,
            -p.gamma * f + 2.0 * p.lam_up,
            -1j * np.conj(kap) * b - 1j * kap * np.conj(c) + 0.5 * abs(kap) ** 2 / eta2,
        ],
        dtype=complex,
    )


def oscillator_characteristic(
    p: OscillatorParams,
    kappa: Optional[np.ndarray],
    alpha0: complex,
    mu0: complex,
    nu0: float,
    grid: TimeGrid,
    *,
    substeps: int = 8,
) -> OscillatorCharacteristic:
    """Integrate the Gaussian coefficient system; Φ_t = exp[−h(t)].

    ``kappa`` holds the engine-level complex test values per grid cell (the
    convention of the paired channels (ηa,1),(ηa,i)); internally the
    equations use κ = η*·κ_eng.  ``None`` means κ ≡ 0, which reduces the
    output to the a-priori moment paths: b(t) = mean of ``a``,
    d(t) = pair moment, f(t) = number variance, Φ ≡ 1.
    """
    if p.eta == 0:
        raise ConfigError("the characteristic system needs a detection channel (eta != 0)")
    if kappa is None:
        kappa = np.zeros(grid.steps, dtype=complex)
    kappa = np.asarray(kappa, dtype=complex)
    if kappa.shape != (grid.steps,):
        raise ConfigError(f"kappa must have one value per grid cell ({grid.steps}), got {kappa.shape}")
    y = np.array([alpha0, alpha0, mu0, nu0, 0.0], dtype=complex)
    out = np.empty((grid.steps + 1, 5), dtype=complex)
    out[0] = y
    h = grid.dt / substeps
    for s in range(grid.steps):
        kap = np.conj(p.eta) * kappa[s]
        for sub in range(substeps):
            t = grid.times[s] + sub * h
            k1 = _coeff_rhs(p, kap, p.g_at(t), y)
            k2 = _coeff_rhs(p, kap, p.g_at(t + 0.5 * h), y + 0.5 * h * k1)
            k3 = _coeff_rhs(p, kap, p.g_at(t + 0.5 * h), y + 0.5 * h * k2)
            k4 = _coeff_rhs(p, kap, p.g_at(t + h), y + h * k3)
            y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out[s + 1] = y
    return OscillatorCharacteristic(
        times=grid.times, b=out[:, 0], c=out[:, 1], d=out[:, 2], f=out[:, 3], h=out[:, 4]
    )


def apriori_mean(p: OscillatorParams, alpha0: complex, t: float) -> complex:
    """α(t) for constant drive g (closed form)."""
    if callable(p.g):
        raise ConfigError("closed-form mean needs a constant drive; integrate the coefficient system instead")
    decay = 1j * p.omega + 0.5 * p.gamma
    damp = np.exp(-decay * t)
    g = complex(p.g)
    return complex(damp * alpha0 - 1j * g * (1.0 - damp) / decay)


def apriori_number(p: OscillatorParams, nu0: float, t: float) -> float:
    """C(t) = 2λ↑/Γ + (ν₀ − 2λ↑/Γ)e^{−Γt}: a-priori Tr{a†aσ} minus |mean|²."""
    ratio = 2.0 * p.lam_up / p.gamma
    return ratio + (nu0 - ratio) * math.exp(-p.gamma * t)


def apriori_pair_moment(p: OscillatorParams, mu0: complex, t: float) -> complex:
    """Centered a-priori pair moment: Tr{a²σ} − (mean)² = e^{−(2iω+Γ)t}μ₀."""
    return complex(np.exp(-(2j * p.omega + p.gamma) * t) * mu0)


def output_covariance(
    p: OscillatorParams,
    nu0: float,
    s: float,
    s_prime: float,
    *,
    dt: Optional[float] = None,
) -> complex:
    """Covariance kernel of the complex output rate at times (s, s′).

    Off the diagonal this is e^{−(iω+Γ/2)(s−s′)}C(s′) for s > s′ (and the
    reflected form for s < s′); the white-noise part on the diagonal is a
    delta, represented on a grid of spacing ``dt`` as 1/(2|η|²dt).
    """
    if s == s_prime:
        if dt is None:
            raise ConfigError("the diagonal holds a delta; pass the grid spacing dt to represent it")
        return 1.0 / (2.0 * abs(p.eta) ** 2 * dt) + apriori_number(p, nu0, s)
    lo, hi = (s_prime, s) if s > s_prime else (s, s_prime)
    kernel = np.exp(-(1j * p.omega + 0.5 * p.gamma) * (hi - lo)) * apriori_number(p, nu0, lo)
    return complex(kernel) if s > s_prime else complex(np.conj(kernel))


def output_pseudo_covariance(p: OscillatorParams, mu0: complex, s: float, s_prime: float) -> complex:
    """Pseudo-covariance kernel e^{−(iω+Γ/2)(s+s′)}μ₀ of the complex output."""
    return complex(np.exp(-(1j * p.omega + 0.5 * p.gamma) * (s + s_prime)) * mu0)

"""Shared model builders and small utilities for the test suite."""

from __future__ import annotations

import numpy as np

from contmeas import (
    CountingChannel,
    DiffusiveChannel,
    MeasurementModel,
    TimeGrid,
    oscillator_model,
    twolevel_model,
)
from contmeas.model import pauli


def rng_for(seed: int, traj: int = 0) -> np.random.Generator:
    """The trajectory stream convention used everywhere: Philox(seed, traj)."""
    return np.random.Generator(np.random.Philox(key=[seed, traj]))


def excited() -> np.ndarray:
    """|1><1| in the excited-first basis."""
    rho = np.zeros((2, 2), dtype=complex)
    rho[0, 0] = 1.0
    return rho


def ground() -> np.ndarray:
    rho = np.zeros((2, 2), dtype=complex)
    rho[1, 1] = 1.0
    return rho


def pure_decay_model(
    lam_minus: float = 0.0,
    lam_one: float = 2.0,
    horizon: float = 1.0,
    steps: int = 100,
    omega: float = 0.0,
) -> MeasurementModel:
    """Two-level atom with no pump: at most one observed count ever."""
    return twolevel_model(omega, 0.0, lam_minus, lam_one, TimeGrid(0.0, horizon, steps))


def pumped_twolevel_model(
    omega: float = 1.0,
    lam_plus: float = 0.5,
    lam_minus: float = 0.3,
    lam_one: float = 1.0,
    horizon: float = 1.0,
    steps: int = 100,
) -> MeasurementModel:
    """The stock counting example: pumped atom with one observed decay channel."""
    return twolevel_model(omega, lam_plus, lam_minus, lam_one, TimeGrid(0.0, horizon, steps))


def twolevel_diffusive_model(
    omega: float = 0.0,
    lam_z: float = 1.0,
    horizon: float = 0.5,
    steps: int = 50,
    f: complex = 1.0 + 0.0j,
) -> MeasurementModel:
    """Two-level atom watched diffusively through Z = sqrt(lam_z)·σ₋."""
    p = pauli()
    return MeasurementModel(
        dim=2,
        hamiltonian=0.5 * omega * p["s3"],
        diffusive=(DiffusiveChannel(z=np.sqrt(lam_z) * p["sm"], f=f, label=0),),
        grid=TimeGrid(0.0, horizon, steps),
    )


def small_oscillator_model(
    dim: int = 10,
    omega: float = 1.0,
    lam_down: float = 0.5,
    lam_up: float = 0.15,
    eta: complex = 1.0,
    g: complex = 0.4,
    horizon: float = 1.0,
    steps: int = 100,
) -> MeasurementModel:
    """The stock diffusive example: driven thermal oscillator, both quadratures."""
    return oscillator_model(dim, omega, lam_down, lam_up, eta, g, TimeGrid(0.0, horizon, steps))


def random_state(rng: np.random.Generator, dim: int) -> np.ndarray:
    """A full-rank random density matrix."""
    x = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    rho = x @ x.conj().T
    return rho / np.trace(rho).real


def random_hermitian(rng: np.random.Generator, dim: int) -> np.ndarray:
    x = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return 0.5 * (x + x.conj().T)


def matrix_units(dim: int):
    """Hermitian-ish probe basis spanning all matrix units."""
    for i in range(dim):
        for j in range(dim):
            e = np.zeros((dim, dim), dtype=complex)
            e[i, j] = 1.0
            yield e

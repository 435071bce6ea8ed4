"""Simulators and verification oracles for measurements continuous in time.

The package covers both sides of the continuous-measurement story:

* a-posteriori dynamics — exact-jump-time counting trajectories and
  Euler–Maruyama diffusive trajectories, in nonlinear (normalized), linear
  (unnormalized) and pure-state forms;
* a-priori dynamics — the master equation the trajectory ensemble averages
  to, plus characteristic functionals of the measurement record;
* closed-form oracles — the two-level atom filter and photodetection
  densities, and the Gaussian oscillator (coefficient ODEs, Riccati
  posterior variance, output covariances);
* the ε-scaling harness connecting counting detection to its diffusive
  limit, with generator-gap and output-statistics convergence reports.

See the command-line tool ``contmeas`` for config-driven runs.
"""

from .errors import ConfigError, ContractViolationError
from .hilbert import DEFAULT_TOL, CellPropagator, Tolerances
from .model import (
    CountingChannel,
    DiffusiveChannel,
    MeasurementModel,
    TimeGrid,
    coherent_state,
    displacement,
    fock_ops,
    liouvillian_apply,
    liouvillian_matrix,
    master_evolve,
    model_from_config,
    model_to_config,
    oscillator_model,
    pauli,
    thermal_state,
    twolevel_model,
)
from .counting import (
    CountRealization,
    TrajectoryRecord,
    jump_apply,
    linear_counting_evolve,
    no_jump_propagate,
    nonlinear_counting_step,
    observed_rates,
    pure_counting_step,
    sample_jump,
    simulate_counting_trajectory,
)
from .diffusive import (
    EnsembleStats,
    OutputPath,
    complexify_channels,
    diffusive_ensemble,
    diffusive_step,
    linear_diffusive_evolve,
    output_mean_rate,
    pure_diffusive_step,
    simulate_diffusive_trajectory,
    simulate_pure_diffusive_trajectory,
)
from .charfun import (
    CharacteristicResult,
    TestFunction,
    characteristic_generator_matrix,
    constant_test_function,
    monte_carlo_characteristic,
    propagate_characteristic,
)
from .oracles import (
    GaussianPosterior,
    OscillatorCharacteristic,
    OscillatorParams,
    TwoLevelFilterState,
    TwoLevelParams,
    apriori_mean,
    apriori_number,
    apriori_pair_moment,
    oscillator_characteristic,
    oscillator_dw,
    output_covariance,
    output_pseudo_covariance,
    pure_decay_epd,
    riccati_posterior_evolve,
    riccati_residual,
    riccati_stationary,
    twolevel_filter_evolve,
)
from .scaling import (
    LimitSweepRow,
    ScaledModel,
    expected_counts,
    fit_gap_slope,
    generator_gap,
    limit_sweep,
    scale_counting_model,
    scaled_counting_ensemble,
    scaled_outputs,
)

__all__ = [name for name in dir() if not name.startswith("_")]

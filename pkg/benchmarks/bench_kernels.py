"""Benchmark the compiled counting kernel against the pure-Python fallback.

Runs identical trajectory batches through both backends (same models, same
counter-based seeds), checks that the event records agree exactly, and
prints a timing table.  The backend is switched per call through the
``CONTMEAS_FORCE_PY`` environment variable, so a single process measures
both paths.

Usage::

    python3 benchmarks/bench_kernels.py [--trajectories N] [--seed S]
"""

import argparse
import math
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "tests"))

import helpers  # noqa: E402
from contmeas import (  # noqa: E402
    CountingChannel,
    MeasurementModel,
    TimeGrid,
    coherent_state,
    simulate_counting_trajectory,
)
from contmeas.kernels import build_counting_plan, compiled_available  # noqa: E402


def _oscillator_counting_model(dim: int = 10) -> MeasurementModel:
    a = np.diag(np.sqrt(np.arange(1, dim)), 1).astype(complex)
    n_op = np.diag(np.arange(dim)).astype(complex)
    return MeasurementModel(
        dim=dim,
        hamiltonian=1.0 * n_op + 0.4 * (a + a.conj().T),
        counting=(CountingChannel(kraus=(math.sqrt(1.0) * a,), label=0),),
        dissipators=(CountingChannel(kraus=(math.sqrt(0.6) * a.conj().T,), label=1),),
        grid=TimeGrid(0.0, 1.0, 50),
    )


def _run_batch(model, rho0, n_traj, seed, plan):
    t0 = time.perf_counter()
    events = []
    for i in range(n_traj):
        rec = simulate_counting_trajectory(
            model, rho0, rng=helpers.rng_for(seed, i), snapshot_stride=0, plan=plan
        )
        events.append(rec.realization.events)
    return time.perf_counter() - t0, events


def _compare(ev_fast, ev_slow):
    """Event records must agree structurally; jump times within 1e-9.

    The two backends bisect the same survival draws, so channels and event
    counts match exactly while times may differ by floating-point dust (the
    same tolerance the parity tests enforce).  Returns (ok, max |Δt|).
    """
    worst = 0.0
    for ea, eb in zip(ev_fast, ev_slow):
        if len(ea) != len(eb):
            return False, math.inf
        for (ta, ca), (tb, cb) in zip(ea, eb):
            if ca != cb or abs(ta - tb) > 1e-9:
                return False, math.inf
            worst = max(worst, abs(ta - tb))
    return True, worst


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trajectories", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=91)
    args = ap.parse_args(argv)

    if not compiled_available():
        print("compiled kernel not built; nothing to compare against")
        return 1

    psi = coherent_state(10, 1.0)
    cases = [
        ("pumped two-level, T=1", helpers.pumped_twolevel_model(), helpers.excited()),
        ("decaying oscillator (d=10), T=1", _oscillator_counting_model(),
         np.outer(psi, psi.conj())),
    ]
    n = args.trajectories
    print(f"{n} trajectories per case, Philox(key=[{args.seed}, i]) streams\n")
    print(f"{'case':<34} {'compiled':>10} {'fallback':>10} {'speedup':>8} {'max |Δt|':>10}")
    status = 0
    for name, model, rho0 in cases:
        plan = build_counting_plan(model)
        os.environ.pop("CONTMEAS_FORCE_PY", None)
        t_fast, ev_fast = _run_batch(model, rho0, n, args.seed, plan)
        os.environ["CONTMEAS_FORCE_PY"] = "1"
        t_slow, ev_slow = _run_batch(model, rho0, n, args.seed, plan)
        os.environ.pop("CONTMEAS_FORCE_PY", None)
        agree, worst = _compare(ev_fast, ev_slow)
        if not agree:
            status = 1
        print(f"{name:<34} {t_fast:>9.2f}s {t_slow:>9.2f}s {t_slow / t_fast:>7.1f}x"
              f" {worst:>9.1e}{'' if agree else '   RECORDS DIVERGED'}")
    if status:
        print("\nbackend outputs diverged; see above")
    return status


if __name__ == "__main__":
    raise SystemExit(main())

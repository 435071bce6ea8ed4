r"""Pure-Python counting kernel (fallback for the compiled extension).

Implements the exact jump-time alternation: march output cells under the
frozen no-count semigroup, invert the survival probability against a fresh
uniform draw per segment, bisect the bracketing cell to ``tol_time``, draw
the channel from the exact discrete distribution at the jump time, reset,
repeat.  Alongside the physical state it accumulates

* cumulative counts and the log of the linear-filter normalization
  ``log c(t)`` (jump factors ``tau * Tr{J_j y}`` times segment survivals),
* the per-channel compensator ``∫ Tr{R_j ρ(s)} ds`` by Simpson's rule on
  each smooth piece (pieces never straddle a jump or a cell boundary, so
  the quadrature error is O(piece⁵)).

Random numbers are drawn in a fixed order — one uniform per no-count
segment, one per jump for channel selection — and the compiled kernel in
``_countkern`` draws identically, so both backends walk the same
trajectories for the same seed.
"""

from __future__ import annotations

import math

import numpy as np

SURVIVAL_SLACK = 1e-8


def _simpson_piece(w_fn, r_fn, a: float, b: float) -> np.ndarray:
    """∫_a^b rates(s)/w(s) ds for one smooth piece of a no-count segment."""
    if b <= a:
        return 0.0
    mid = 0.5 * (a + b)
    g0 = r_fn(a) / w_fn(a)
    g1 = r_fn(mid) / w_fn(mid)
    g2 = r_fn(b) / w_fn(b)
    return (b - a) / 6.0 * (g0 + 4.0 * g1 + g2)


def run_counting(plan, y0: np.ndarray, rng, snapshot_stride: int):
    """One trajectory; see `kernels.run_counting_trajectory_raw` for the contract."""
    d = plan.dim
    n_ch = plan.n_ch
    n_nodes = plan.n_cells + 1

    counts = np.zeros((n_nodes, n_ch), dtype=np.int64)
    log_c = np.zeros(n_nodes, dtype=float)
    comp = np.zeros((n_nodes, n_ch), dtype=float)
    want_snaps = snapshot_stride > 0
    snaps = []
    events_t: list[float] = []
    events_j: list[int] = []

    y = y0.copy()
    log_c_run = 0.0
    comp_run = np.zeros(n_ch, dtype=float)
    cum_counts = np.zeros(n_ch, dtype=np.int64)
    u = rng.random()
    status = 0

    if want_snaps:
        snaps.append(y.copy())

    for k in range(plan.n_cells):
        slot = int(plan.cell_slot[k])
        t_cell = plan.t0 + k * plan.h
        s_cur = 0.0
        while True:
            rem = plan.h - s_cur
            w_fn, r_fn = plan.decay_probes(slot, y)
            w_in = w_fn(0.0)
            w_end = w_fn(rem)
            if w_in > 1.0 + SURVIVAL_SLACK or w_end < -SURVIVAL_SLACK or w_end > w_in + SURVIVAL_SLACK:
                status = 3
                break
            if w_end > u:
                # no jump before the cell boundary
                comp_run = comp_run + _simpson_piece(w_fn, r_fn, 0.0, rem)
                if s_cur == 0.0 and not plan.slot_ok[slot]:
                    y = plan.apply_full_cell(slot, y)
                else:
                    y = plan.apply_partial(slot, y, rem)
                break
            # bisect the jump time inside (0, rem]
            lo, hi = 0.0, rem
            while hi - lo > plan.tol_time:
                mid = 0.5 * (lo + hi)
                if w_fn(mid) > u:
                    lo = mid
                else:
                    hi = mid
            s_star = 0.5 * (lo + hi)
            comp_run = comp_run + _simpson_piece(w_fn, r_fn, 0.0, s_star)
            rates = np.maximum(r_fn(s_star), 0.0)
            r_tot = float(rates.sum())
            w_star = w_fn(s_star)
            if r_tot <= plan.rate_tol * max(w_star, 1e-300):
                status = 2
                break
            v = rng.random() * r_tot
            j = 0
            acc = rates[0]
            while acc < v and j < n_ch - 1:
                j += 1
                acc += rates[j]
            y_star = plan.apply_partial(slot, y, s_star)
            y_new = plan.J[j] @ y_star
            tr = float(y_new[:: d + 1].sum().real)
            if tr <= 0.0:
                status = 2
                break
            log_c_run += math.log(plan.tau * tr)
            y = y_new / tr
            events_t.append(t_cell + s_cur + s_star)
            events_j.append(j)
            cum_counts[j] += 1
            if len(events_t) >= plan.max_events:
                status = 1
                break
            u = rng.random()
            s_cur += s_star
            if plan.h - s_cur <= 0.0:
                break
        if status:
            break
        w_node = float(y[:: d + 1].sum().real)
        counts[k + 1] = cum_counts
        log_c[k + 1] = log_c_run + math.log(max(w_node, 1e-300))
        comp[k + 1] = comp_run
        if want_snaps and (k + 1) % snapshot_stride == 0:
            snaps.append(y / w_node)

    snaps_arr = np.array(snaps) if want_snaps else None
    return (
        np.array(events_t, dtype=float),
        np.array(events_j, dtype=np.int32),
        counts,
        log_c,
        comp,
        snaps_arr,
        status,
    )

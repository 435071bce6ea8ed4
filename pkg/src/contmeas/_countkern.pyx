# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counting kernel: the hot inner loop of the jump engine.

Algorithm and random-draw order mirror ``contmeas._pykern.run_counting``
exactly (one uniform per no-count segment, one per jump); keep the two in
lockstep when changing either.  This kernel only handles the fast path where
every cell generator has a trustworthy eigendecomposition — the dispatcher
falls back to the Python kernel otherwise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, log, sin

cnp.import_array()

ctypedef double complex cplx

DEF SURVIVAL_SLACK = 1e-8


cdef inline cplx _cexp(cplx lam, double s) noexcept nogil:
    cdef double scale = exp(lam.real * s)
    return scale * cos(lam.imag * s) + 1j * (scale * sin(lam.imag * s))


cdef inline void _matvec(cplx[:, ::1] m, cplx[::1] x, cplx[::1] out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef cplx acc
    for i in range(n):
        acc = 0
        for j in range(n):
            acc = acc + m[i, j] * x[j]
        out[i] = acc


cdef inline double _w_probe(cplx[::1] tv, cplx[::1] lam, cplx[::1] z, double s, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef cplx acc = 0
    for i in range(n):
        acc = acc + tv[i] * _cexp(lam[i], s) * z[i]
    return acc.real


cdef inline void _rates_probe(cplx[:, ::1] rr, cplx[::1] lam, cplx[::1] z, double s,
                              double[::1] out, Py_ssize_t nch, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t c, i
    cdef cplx acc, e
    for c in range(nch):
        acc = 0
        for i in range(n):
            acc = acc + rr[c, i] * _cexp(lam[i], s) * z[i]
        out[c] = acc.real


cdef inline double _trace_re(cplx[::1] y, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t k
    cdef cplx acc = 0
    for k in range(d):
        acc = acc + y[k * (d + 1)]
    return acc.real


def run_counting(cplx[:, ::1] lam_all, cplx[:, :, ::1] v_all, cplx[:, :, ::1] vinv_all,
                 cplx[:, :, ::1] p_all, cplx[:, :, ::1] j_all, cplx[:, ::1] tv_all,
                 cplx[:, :, ::1] rrv_all, int[::1] cell_slot, cplx[::1] y0,
                 Py_ssize_t dim, double h, double t0, double tau, double tol_time,
                 double rate_tol, Py_ssize_t max_events, Py_ssize_t snapshot_stride,
                 object rng):
    cdef Py_ssize_t d2 = dim * dim
    cdef Py_ssize_t n_cells = cell_slot.shape[0]
    cdef Py_ssize_t n_ch = j_all.shape[0]
    cdef Py_ssize_t n_nodes = n_cells + 1

    counts_np = np.zeros((n_nodes, n_ch), dtype=np.int64)
    log_c_np = np.zeros(n_nodes, dtype=np.float64)
    comp_np = np.zeros((n_nodes, n_ch), dtype=np.float64)
    cdef long long[:, ::1] counts = counts_np
    cdef double[::1] log_c = log_c_np
    cdef double[:, ::1] comp = comp_np

    y_np = np.array(y0, dtype=np.complex128)
    z_np = np.empty(d2, dtype=np.complex128)
    ez_np = np.empty(d2, dtype=np.complex128)
    ytmp_np = np.empty(d2, dtype=np.complex128)
    r0_np = np.empty(n_ch, dtype=np.float64)
    r1_np = np.empty(n_ch, dtype=np.float64)
    r2_np = np.empty(n_ch, dtype=np.float64)
    comp_run_np = np.zeros(n_ch, dtype=np.float64)
    cum_counts_np = np.zeros(n_ch, dtype=np.int64)
    cdef cplx[::1] y = y_np
    cdef cplx[::1] z = z_np
    cdef cplx[::1] ez = ez_np
    cdef cplx[::1] ytmp = ytmp_np
    cdef double[::1] r0 = r0_np
    cdef double[::1] r1 = r1_np
    cdef double[::1] r2 = r2_np
    cdef double[::1] comp_run = comp_run_np
    cdef long long[::1] cum_counts = cum_counts_np

    events_t = []
    events_j = []
    snaps = [] if snapshot_stride > 0 else None

    cdef cplx[::1] lam
    cdef cplx[:, ::1] v
    cdef cplx[:, ::1] vinv
    cdef cplx[::1] tv
    cdef cplx[:, ::1] rr

    cdef Py_ssize_t k, slot, i, jsel, n_events = 0
    cdef double s_cur, rem, w_in, w_end, lo, hi, mid, s_star, w_mid
    cdef double w0, wm, wb, r_tot, v_draw, tr_new, w_star, w_node, u, seg
    cdef double log_c_run = 0.0
    cdef int status = 0

    u = rng.random()
    if snapshot_stride > 0:
        snaps.append(y_np.copy())

    for k in range(n_cells):
        slot = cell_slot[k]
        lam = lam_all[slot]
        v = v_all[slot]
        vinv = vinv_all[slot]
        tv = tv_all[slot]
        rr = rrv_all[slot]
        s_cur = 0.0
        while True:
            rem = h - s_cur
            _matvec(vinv, y, z, d2)
            w_in = _w_probe(tv, lam, z, 0.0, d2)
            w_end = _w_probe(tv, lam, z, rem, d2)
            if w_in > 1.0 + SURVIVAL_SLACK or w_end < -SURVIVAL_SLACK or w_end > w_in + SURVIVAL_SLACK:
                status = 3
                break
            if w_end > u:
                # no jump before the cell boundary: Simpson compensator, propagate
                mid = 0.5 * rem
                w0 = w_in
                wm = _w_probe(tv, lam, z, mid, d2)
                wb = w_end
                _rates_probe(rr, lam, z, 0.0, r0, n_ch, d2)
                _rates_probe(rr, lam, z, mid, r1, n_ch, d2)
                _rates_probe(rr, lam, z, rem, r2, n_ch, d2)
                for i in range(n_ch):
                    comp_run[i] = comp_run[i] + rem / 6.0 * (r0[i] / w0 + 4.0 * r1[i] / wm + r2[i] / wb)
                for i in range(d2):
                    ez[i] = _cexp(lam[i], rem) * z[i]
                _matvec(v, ez, y, d2)
                break
            # jump inside (0, rem]: bisect survival against u
            lo = 0.0
            hi = rem
            while hi - lo > tol_time:
                mid = 0.5 * (lo + hi)
                w_mid = _w_probe(tv, lam, z, mid, d2)
                if w_mid > u:
                    lo = mid
                else:
                    hi = mid
            s_star = 0.5 * (lo + hi)
            mid = 0.5 * s_star
            w0 = w_in
            wm = _w_probe(tv, lam, z, mid, d2)
            wb = _w_probe(tv, lam, z, s_star, d2)
            _rates_probe(rr, lam, z, 0.0, r0, n_ch, d2)
            _rates_probe(rr, lam, z, mid, r1, n_ch, d2)
            _rates_probe(rr, lam, z, s_star, r2, n_ch, d2)
            if s_star > 0.0:
                for i in range(n_ch):
                    comp_run[i] = comp_run[i] + s_star / 6.0 * (r0[i] / w0 + 4.0 * r1[i] / wm + r2[i] / wb)
            w_star = wb
            r_tot = 0.0
            for i in range(n_ch):
                if r2[i] < 0.0:
                    r2[i] = 0.0
                r_tot = r_tot + r2[i]
            if r_tot <= rate_tol * max(w_star, 1e-300):
                status = 2
                break
            v_draw = rng.random() * r_tot
            jsel = 0
            seg = r2[0]
            while seg < v_draw and jsel < n_ch - 1:
                jsel += 1
                seg = seg + r2[jsel]
            for i in range(d2):
                ez[i] = _cexp(lam[i], s_star) * z[i]
            _matvec(v, ez, ytmp, d2)
            _matvec(j_all[jsel], ytmp, y, d2)
            tr_new = _trace_re(y, dim)
            if tr_new <= 0.0:
                status = 2
                break
            for i in range(d2):
                y[i] = y[i] / tr_new
            events_t.append(t0 + k * h + s_cur + s_star)
            events_j.append(jsel)
            cum_counts[jsel] += 1
            n_events += 1
            log_c_run = log_c_run + log(tau * tr_new)
            if n_events >= max_events:
                status = 1
                break
            u = rng.random()
            s_cur = s_cur + s_star
            if h - s_cur <= 0.0:
                break
        if status != 0:
            break
        w_node = _trace_re(y, dim)
        for i in range(n_ch):
            counts[k + 1, i] = cum_counts[i]
            comp[k + 1, i] = comp_run[i]
        log_c[k + 1] = log_c_run + log(max(w_node, 1e-300))
        if snapshot_stride > 0 and (k + 1) % snapshot_stride == 0:
            snaps.append(y_np / w_node)

    snaps_arr = np.array(snaps) if snapshot_stride > 0 else None
    return (
        np.array(events_t, dtype=np.float64),
        np.array(events_j, dtype=np.int32),
        counts_np,
        log_c_np,
        comp_np,
        snaps_arr,
        status,
    )

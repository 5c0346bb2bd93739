# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled path-sampling kernel; bit-identical twin of ``_kernel_pure``.

Every formula, draw order and accumulation order mirrors the pure module;
the extension is built with -ffp-contract=off so C arithmetic matches
IEEE-754 double operations one for one.  Keep the two files in sync.
"""
import numpy as np

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport INFINITY, log
from numpy.random cimport bitgen_t

from mfjump._kernel_pure import MajorantError

IMPL = "compiled"


cdef object _philox(object seed, long stream, long index):
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF,
                    ((int(stream) << 48) + int(index)) & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Philox(key=key)


cdef inline double _next(bitgen_t *rng) noexcept nogil:
    return rng.next_double(rng.state)


cdef inline double _antider(const double[:, :] cum, const double[:, :] left,
                            const double[:, :] right, double dt, long n_steps,
                            long i, double t) noexcept nogil:
    cdef long k
    cdef double s
    if t <= 0.0:
        return cum[0, i]
    k = <long>(t / dt)
    if k >= n_steps:
        k = n_steps - 1
    s = t / dt - k
    if s > 1.0:
        s = 1.0
    return cum[k, i] + dt * (left[k, i] * s + 0.5 * (right[k, i] - left[k, i]) * s * s)


cdef inline double _antider3(const double[:, :, :] cum, const double[:, :, :] left,
                             const double[:, :, :] right, double dt, long n_steps,
                             long i, long j, double t) noexcept nogil:
    cdef long k
    cdef double s
    if t <= 0.0:
        return cum[0, i, j]
    k = <long>(t / dt)
    if k >= n_steps:
        k = n_steps - 1
    s = t / dt - k
    if s > 1.0:
        s = 1.0
    return cum[k, i, j] + dt * (left[k, i, j] * s
                                + 0.5 * (right[k, i, j] - left[k, i, j]) * s * s)


# Shared thinning step: advance (t, i) to the next accepted jump or the horizon.
# Returns the destination state (>= 0) with t/k/s updated, -1 at the horizon,
# -2 on a majorant violation (t and i then name the offending point).
cdef inline long _advance(const double[:, :, :] tl, const double[:, :, :] tr,
                          const double[:, :] rsl, const double[:, :] rsr,
                          const double[:] majorant, double dt, double horizon,
                          long n_steps, long n_states, bitgen_t *rng,
                          double *t_io, long i, long *k_out,
                          double *s_out) noexcept nogil:
    cdef double t = t_io[0]
    cdef double m, total, lam, target, acc, r1, r2, r3, s
    cdef long k, jj, j, last
    m = majorant[i]
    if not m > 0.0:
        t_io[0] = horizon
        return -1
    while True:
        r1 = _next(rng)
        t = t - log(1.0 - r1) / m
        if t >= horizon:
            t_io[0] = t
            return -1
        k = <long>(t / dt)
        if k >= n_steps:
            k = n_steps - 1
        s = t / dt - k
        total = rsl[k, i] + s * (rsr[k, i] - rsl[k, i])
        if total > m:
            t_io[0] = t
            return -2
        r2 = _next(rng)
        if r2 * m < total:
            r3 = _next(rng)
            target = r3 * total
            acc = 0.0
            j = -1
            last = -1
            for jj in range(n_states):
                if jj == i:
                    continue
                lam = tl[k, i, jj] + s * (tr[k, i, jj] - tl[k, i, jj])
                if lam > 0.0:
                    acc += lam
                    last = jj
                    if target < acc:
                        j = jj
                        break
            if j < 0:
                j = last
            if j < 0:
                continue
            t_io[0] = t
            k_out[0] = k
            s_out[0] = s
            return j


cdef _raise_majorant(double total_unused, double t, long i):
    raise MajorantError(
        "rate exceeds majorant at t=%.6g state %d (grid too coarse)" % (t, i))


def sample_path_events(const double[:, :, :] tl, const double[:, :, :] tr,
                       const double[:, :] rsl, const double[:, :] rsr,
                       const double[:] majorant, double dt, double horizon,
                       long x0, object seed, long stream, long index):
    """Twin of _kernel_pure.sample_path_events."""
    cdef long n_steps = rsl.shape[0]
    cdef long n_states = rsl.shape[1]
    ph = _philox(seed, stream, index)
    cdef bitgen_t *rng = <bitgen_t *>PyCapsule_GetPointer(ph.capsule, "BitGenerator")
    cdef double t = 0.0
    cdef double s = 0.0
    cdef long i = x0, j, k = 0
    times, srcs, dsts = [], [], []
    while True:
        j = _advance(tl, tr, rsl, rsr, majorant, dt, horizon, n_steps, n_states,
                     rng, &t, i, &k, &s)
        if j == -1:
            break
        if j == -2:
            _raise_majorant(0.0, t, i)
        times.append(t)
        srcs.append(i)
        dsts.append(j)
        i = j
    return (np.array(times), np.array(srcs, dtype=np.int64),
            np.array(dsts, dtype=np.int64), i)


def batch_payoff_direct(const double[:, :, :] tl, const double[:, :, :] tr,
                        const double[:, :] rsl, const double[:, :] rsr,
                        const double[:] majorant, double dt, double horizon,
                        const double[:, :] fl, const double[:, :] fr,
                        const double[:, :] fcum,
                        long x0, object seed, long stream, long idx_lo, long idx_hi):
    """Twin of _kernel_pure.batch_payoff_direct."""
    cdef long n_steps = rsl.shape[0]
    cdef long n_states = rsl.shape[1]
    cdef long n = idx_hi - idx_lo
    cost_arr = np.zeros(n)
    xend_arr = np.zeros(n, dtype=np.int64)
    cdef double[:] cost = cost_arr
    cdef long[:] x_end = xend_arr
    cdef bitgen_t *rng
    cdef long p, i, j, k
    cdef double t, s, acc, seg_start
    cdef bint bad
    for p in range(n):
        ph = _philox(seed, stream, idx_lo + p)
        rng = <bitgen_t *>PyCapsule_GetPointer(ph.capsule, "BitGenerator")
        bad = False
        with nogil:
            t = 0.0
            seg_start = 0.0
            i = x0
            acc = 0.0
            while True:
                j = _advance(tl, tr, rsl, rsr, majorant, dt, horizon, n_steps,
                             n_states, rng, &t, i, &k, &s)
                if j == -2:
                    bad = True
                    break
                if j == -1:
                    acc += (_antider(fcum, fl, fr, dt, n_steps, i, horizon)
                            - _antider(fcum, fl, fr, dt, n_steps, i, seg_start))
                    break
                acc += (_antider(fcum, fl, fr, dt, n_steps, i, t)
                        - _antider(fcum, fl, fr, dt, n_steps, i, seg_start))
                seg_start = t
                i = j
            cost[p] = acc
            x_end[p] = i
        if bad:
            _raise_majorant(0.0, t, i)
    return cost_arr, xend_arr


def batch_girsanov(const double[:, :, :] gl, const double[:, :, :] gr,
                   const double[:, :] grsl, const double[:, :] grsr,
                   const double[:] gmaj, const double[:, :] g_rates,
                   const double[:] g_rows,
                   const double[:, :, :] tl, const double[:, :, :] tr,
                   const double[:, :] rsl, const double[:, :] rsr,
                   const double[:, :] rscum,
                   const double[:, :] fl, const double[:, :] fr,
                   const double[:, :] fcum, double dt, double horizon,
                   long x0, object seed, long stream, long idx_lo, long idx_hi):
    """Twin of _kernel_pure.batch_girsanov."""
    cdef long n_steps = rsl.shape[0]
    cdef long n_states = rsl.shape[1]
    cdef long n = idx_hi - idx_lo
    logw_arr = np.zeros(n)
    cost_arr = np.zeros(n)
    xend_arr = np.zeros(n, dtype=np.int64)
    cdef double[:] logw = logw_arr
    cdef double[:] cost = cost_arr
    cdef long[:] x_end = xend_arr
    cdef bitgen_t *rng
    cdef long p, i, j, k
    cdef double t, s, acc, lw, seg_start, lam
    cdef bint dead, bad
    for p in range(n):
        ph = _philox(seed, stream, idx_lo + p)
        rng = <bitgen_t *>PyCapsule_GetPointer(ph.capsule, "BitGenerator")
        bad = False
        with nogil:
            t = 0.0
            seg_start = 0.0
            i = x0
            acc = 0.0
            lw = 0.0
            dead = False
            while True:
                j = _advance(gl, gr, grsl, grsr, gmaj, dt, horizon, n_steps,
                             n_states, rng, &t, i, &k, &s)
                if j == -2:
                    bad = True
                    break
                if j == -1:
                    lw -= ((_antider(rscum, rsl, rsr, dt, n_steps, i, horizon)
                            - _antider(rscum, rsl, rsr, dt, n_steps, i, seg_start))
                           - (horizon - seg_start) * g_rows[i])
                    acc += (_antider(fcum, fl, fr, dt, n_steps, i, horizon)
                            - _antider(fcum, fl, fr, dt, n_steps, i, seg_start))
                    break
                lw -= ((_antider(rscum, rsl, rsr, dt, n_steps, i, t)
                        - _antider(rscum, rsl, rsr, dt, n_steps, i, seg_start))
                       - (t - seg_start) * g_rows[i])
                acc += (_antider(fcum, fl, fr, dt, n_steps, i, t)
                        - _antider(fcum, fl, fr, dt, n_steps, i, seg_start))
                lam = tl[k, i, j] + s * (tr[k, i, j] - tl[k, i, j])
                if lam > 0.0:
                    lw += log(lam / g_rates[i, j])
                else:
                    dead = True
                seg_start = t
                i = j
            logw[p] = -INFINITY if dead else lw
            cost[p] = acc
            x_end[p] = i
        if bad:
            _raise_majorant(0.0, t, i)
    return logw_arr, cost_arr, xend_arr


def batch_martingale(const double[:, :, :] tl, const double[:, :, :] tr,
                     const double[:, :] rsl, const double[:, :] rsr,
                     const double[:] majorant, const double[:, :, :] paircum,
                     const long[:, :] pair_col, double dt, double horizon,
                     long x0, object seed, long stream, long idx_lo, long idx_hi,
                     long n_pairs):
    """Twin of _kernel_pure.batch_martingale."""
    cdef long n_steps = rsl.shape[0]
    cdef long n_states = rsl.shape[1]
    cdef long n = idx_hi - idx_lo
    out_arr = np.zeros((n, n_pairs))
    cdef double[:, :] out = out_arr
    cdef bitgen_t *rng
    cdef long p, i, j, k, jj, col
    cdef double t, s, seg_start
    cdef bint bad
    for p in range(n):
        ph = _philox(seed, stream, idx_lo + p)
        rng = <bitgen_t *>PyCapsule_GetPointer(ph.capsule, "BitGenerator")
        bad = False
        with nogil:
            t = 0.0
            seg_start = 0.0
            i = x0
            while True:
                j = _advance(tl, tr, rsl, rsr, majorant, dt, horizon, n_steps,
                             n_states, rng, &t, i, &k, &s)
                if j == -2:
                    bad = True
                    break
                if j == -1:
                    for jj in range(n_states):
                        col = pair_col[i, jj]
                        if col >= 0:
                            out[p, col] -= (
                                _antider3(paircum, tl, tr, dt, n_steps, i, jj, horizon)
                                - _antider3(paircum, tl, tr, dt, n_steps, i, jj, seg_start))
                    break
                for jj in range(n_states):
                    col = pair_col[i, jj]
                    if col >= 0:
                        out[p, col] -= (
                            _antider3(paircum, tl, tr, dt, n_steps, i, jj, t)
                            - _antider3(paircum, tl, tr, dt, n_steps, i, jj, seg_start))
                col = pair_col[i, j]
                if col >= 0:
                    out[p, col] += 1.0
                seg_start = t
                i = j
        if bad:
            _raise_majorant(0.0, t, i)
    return out_arr

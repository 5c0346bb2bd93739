"""Pure-Python path-sampling kernel.

Twin of the compiled kernel in ``_kernel_c.pyx``: same per-path counter-based
RNG streams (Philox keyed by (seed, stream<<48 | path_index), consumed through
``next_double``), same draw order, same scalar arithmetic.  The two lanes
produce bit-identical output; tests assert it.  Keep every formula here in
sync with the .pyx file.

Thinning protocol per sojourn in state i (majorant M_i precomputed over the
grid): draw the candidate waiting time from Exp(M_i), accept with probability
(total rate at the candidate time) / M_i, then pick the destination by walking
the interpolated rate row.  Each candidate consumes two uniforms plus one more
on acceptance.
"""
from __future__ import annotations

import math

import numpy as np

IMPL = "pure"

_MASK64 = (1 << 64) - 1


class MajorantError(RuntimeError):
    """Interpolated total rate exceeded its majorant (grid too coarse)."""


class Uniforms:
    """Buffered uniforms from a per-path Philox stream (next_double order)."""

    __slots__ = ("_gen", "_buf", "_pos")

    def __init__(self, seed, stream, index):
        key = np.array([seed & _MASK64, ((stream << 48) + index) & _MASK64],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self._buf = None
        self._pos = 0

    def __call__(self):
        if self._buf is None or self._pos >= self._buf.size:
            self._buf = self._gen.random(128)
            self._pos = 0
        val = self._buf[self._pos]
        self._pos += 1
        return val


def _antider(cum_col, left_col, right_col, dt, n_steps, t):
    """Antiderivative at t of the piecewise-linear field given node cumsums."""
    if t <= 0.0:
        return cum_col[0]
    k = int(t / dt)
    if k >= n_steps:
        k = n_steps - 1
    s = t / dt - k
    if s > 1.0:
        s = 1.0
    return cum_col[k] + dt * (left_col[k] * s + 0.5 * (right_col[k] - left_col[k]) * s * s)


def _run_path(tl, tr, rsl, rsr, majorant, dt, horizon, n_steps, n_states,
              x0, draw, on_segment, on_jump):
    """Shared thinning loop; calls on_segment(i, a, b) / on_jump(k, s, t, i, j)."""
    t = 0.0
    i = x0
    seg_start = 0.0
    while True:
        m = majorant[i]
        if not m > 0.0:
            break
        r1 = draw()
        t = t - math.log(1.0 - r1) / m
        if t >= horizon:
            break
        k = int(t / dt)
        if k >= n_steps:
            k = n_steps - 1
        s = t / dt - k
        total = rsl[k, i] + s * (rsr[k, i] - rsl[k, i])
        if total > m:
            raise MajorantError(
                "rate %.6g exceeds majorant %.6g at t=%.6g state %d "
                "(grid too coarse)" % (total, m, t, i))
        r2 = draw()
        if r2 * m < total:
            r3 = draw()
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
            if on_segment is not None:
                on_segment(i, seg_start, t)
            if on_jump is not None:
                on_jump(k, s, t, i, j)
            seg_start = t
            i = j
    if on_segment is not None:
        on_segment(i, seg_start, horizon)
    return i


def sample_path_events(tl, tr, rsl, rsr, majorant, dt, horizon,
                       x0, seed, stream, index):
    """One trajectory; returns (times, from_states, to_states, x_T)."""
    n_steps, n_states = rsl.shape
    times, srcs, dsts = [], [], []

    def on_jump(k, s, t, i, j):
        times.append(t)
        srcs.append(i)
        dsts.append(j)

    x_end = _run_path(tl, tr, rsl, rsr, majorant, dt, horizon, n_steps, n_states,
                      x0, Uniforms(seed, stream, index), None, on_jump)
    return (np.array(times), np.array(srcs, dtype=np.int64),
            np.array(dsts, dtype=np.int64), x_end)


def batch_payoff_direct(tl, tr, rsl, rsr, majorant, dt, horizon,
                        fl, fr, fcum, x0, seed, stream, idx_lo, idx_hi):
    """Sample paths under the controlled rates; per-path running-cost integrals.

    Returns (cost integrals, terminal states) for path indices [idx_lo, idx_hi).
    """
    n_steps, n_states = rsl.shape
    n = idx_hi - idx_lo
    cost = np.zeros(n)
    x_end = np.zeros(n, dtype=np.int64)
    for p in range(n):
        acc = 0.0

        def on_segment(i, a, b):
            nonlocal acc
            acc += (_antider(fcum[:, i], fl[:, i], fr[:, i], dt, n_steps, b)
                    - _antider(fcum[:, i], fl[:, i], fr[:, i], dt, n_steps, a))

        x_end[p] = _run_path(tl, tr, rsl, rsr, majorant, dt, horizon,
                             n_steps, n_states, x0,
                             Uniforms(seed, stream, idx_lo + p), on_segment, None)
        cost[p] = acc
    return cost, x_end


def batch_girsanov(gl, gr, grsl, grsr, gmaj, g_rates, g_rows,
                   tl, tr, rsl, rsr, rscum,
                   fl, fr, fcum, dt, horizon, x0, seed, stream, idx_lo, idx_hi):
    """Sample under the reference tables; accumulate log L^u and the cost integral.

    The log-density collects ln(lambda^u_ij(s)/g_ij) at each jump minus the
    integral of (total controlled rate - total reference rate) along the path.
    Returns (logweight, cost integral, terminal state) per path.
    """
    n_steps, n_states = rsl.shape
    n = idx_hi - idx_lo
    logw = np.zeros(n)
    cost = np.zeros(n)
    x_end = np.zeros(n, dtype=np.int64)
    for p in range(n):
        lw = 0.0
        acc = 0.0
        dead = False

        def on_segment(i, a, b):
            nonlocal lw, acc
            lw -= ((_antider(rscum[:, i], rsl[:, i], rsr[:, i], dt, n_steps, b)
                    - _antider(rscum[:, i], rsl[:, i], rsr[:, i], dt, n_steps, a))
                   - (b - a) * g_rows[i])
            acc += (_antider(fcum[:, i], fl[:, i], fr[:, i], dt, n_steps, b)
                    - _antider(fcum[:, i], fl[:, i], fr[:, i], dt, n_steps, a))

        def on_jump(k, s, t, i, j):
            nonlocal lw, dead
            lam = tl[k, i, j] + s * (tr[k, i, j] - tl[k, i, j])
            if lam > 0.0:
                lw += math.log(lam / g_rates[i, j])
            else:
                dead = True

        x_end[p] = _run_path(gl, gr, grsl, grsr, gmaj, dt, horizon,
                             n_steps, n_states, x0,
                             Uniforms(seed, stream, idx_lo + p), on_segment, on_jump)
        logw[p] = -math.inf if dead else lw
        cost[p] = acc
    return logw, cost, x_end


def batch_martingale(tl, tr, rsl, rsr, majorant, paircum, pair_col, dt, horizon,
                     x0, seed, stream, idx_lo, idx_hi, n_pairs):
    """Per-path terminal values of the compensated pair-counting processes.

    out[p, c] = N_ij(T) - int_0^T 1{x=i} lambda_ij dt for the tracked pair of
    column c (pair_col[i, j] maps pairs to columns, -1 untracked).
    """
    n_steps, n_states = rsl.shape
    n = idx_hi - idx_lo
    out = np.zeros((n, n_pairs))
    for p in range(n):
        row = out[p]

        def on_segment(i, a, b):
            for jj in range(n_states):
                col = pair_col[i, jj]
                if col >= 0:
                    row[col] -= (
                        _antider(paircum[:, i, jj], tl[:, i, jj], tr[:, i, jj],
                                 dt, n_steps, b)
                        - _antider(paircum[:, i, jj], tl[:, i, jj], tr[:, i, jj],
                                   dt, n_steps, a))

        def on_jump(k, s, t, i, j):
            col = pair_col[i, j]
            if col >= 0:
                row[col] += 1.0

        _run_path(tl, tr, rsl, rsr, majorant, dt, horizon, n_steps, n_states,
                  x0, Uniforms(seed, stream, idx_lo + p), on_segment, on_jump)
    return out

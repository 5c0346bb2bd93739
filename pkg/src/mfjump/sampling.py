"""Trajectory sampling, change-of-measure weights and Monte Carlo estimators.

Paths of the frozen-flow controlled chain are sampled by thinning against
per-state majorants taken over the time grid.  Each path owns a counter-based
RNG stream keyed by (seed, estimator stream, path index), so serial and
threaded runs produce bit-identical estimates.  The hot loops live in the
kernel lane (compiled extension with a pure-Python fallback).
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernel import MajorantError, impl
from .backward import CostSpec
from .fields import RateTables, cost_tables, rate_tables
from .flows import FeedbackControl, Flow, TimeGrid
from .model import Dist, IntensityModel, ModelError, wasserstein1

__all__ = [
    "PathRecord",
    "McEstimate",
    "MartingaleReport",
    "ParticleReport",
    "MajorantError",
    "sample_path",
    "girsanov_logweight",
    "payoff_mc_direct",
    "payoff_mc_girsanov",
    "martingale_diagnostic",
    "particle_system",
    "dump_paths_csv",
]

# Stream tags keep the estimators' RNG streams disjoint under a shared seed.
STREAM_PATH = 0
STREAM_GIRSANOV = 1
STREAM_MARTINGALE = 2
STREAM_PARTICLE = 3


@dataclass(frozen=True)
class PathRecord:
    """One trajectory: start state, (time, from, to) jumps, log Girsanov weight."""

    x0: int
    events: tuple
    horizon: float
    log_girsanov: float = 0.0

    def __post_init__(self):
        prev_t, prev_state = 0.0, self.x0
        for t, i, j in self.events:
            if not (prev_t < t <= self.horizon):
                raise ModelError("event times must increase within (0, T]")
            if i != prev_state:
                raise ModelError("event chain broken: from-state %d != %d" % (i, prev_state))
            if i == j:
                raise ModelError("self-jump recorded")
            prev_t, prev_state = t, j

    @property
    def x_end(self) -> int:
        return self.events[-1][2] if self.events else self.x0

    def counting(self, n_states: int) -> np.ndarray:
        """Terminal pair counts N_ij(T)."""
        counts = np.zeros((n_states, n_states))
        for _, i, j in self.events:
            counts[i, j] += 1
        return counts


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo mean with its standard error."""

    mean: float
    std_error: float
    n_paths: int
    seed: int

    def agrees_with(self, other, k: float = 3.0) -> bool:
        se = math.hypot(self.std_error, getattr(other, "std_error", 0.0))
        mean = other.mean if isinstance(other, McEstimate) else float(other)
        return abs(self.mean - mean) <= k * se

    def to_json_obj(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error,
                "n_paths": self.n_paths, "seed": self.seed}


def _chunked(fn, n_paths: int, threads: int):
    """Run fn(idx_lo, idx_hi) over path-index chunks; concatenation is
    independent of the thread count because outputs are indexed by path."""
    if threads <= 1:
        return fn(0, n_paths)
    bounds = np.linspace(0, n_paths, threads + 1).astype(int)
    spans = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=len(spans)) as ex:
        parts = list(ex.map(lambda ab: fn(*ab), spans))
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(len(parts[0])))


def _estimate(values: np.ndarray, seed: int) -> McEstimate:
    n = values.size
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return McEstimate(mean, se, n, seed)


def sample_path(model: IntensityModel, flow: Flow, u: Optional[FeedbackControl],
                x0: int, seed: int, *, path_index: int = 0,
                v: Optional[FeedbackControl] = None,
                tables: Optional[RateTables] = None) -> PathRecord:
    """Sample one trajectory of the chain with rates frozen at ``flow``.

    Deterministic given (seed, path_index). The record carries the log
    Girsanov weight of the controlled law against the reference chain.
    """
    tab = tables if tables is not None else rate_tables(model, flow, u, v)
    times, srcs, dsts, _ = impl.sample_path_events(
        tab.left, tab.right, tab.rs_left, tab.rs_right, tab.majorant,
        tab.dt, tab.horizon, x0, seed, STREAM_PATH, path_index)
    events = tuple((float(t), int(i), int(j)) for t, i, j in zip(times, srcs, dsts))
    lw = _logweight_from_events(model, tab, x0, events)
    return PathRecord(x0=x0, events=events, horizon=tab.horizon, log_girsanov=lw)


def _logweight_from_events(model: IntensityModel, tab: RateTables,
                           x0: int, events) -> float:
    g = model.g
    lw = 0.0
    t_prev, state = 0.0, x0
    for t, i, j in events:
        if not g.active[i, j]:
            raise ModelError(
                "jump %d->%d has zero reference rate (active pairs misaligned)" % (i, j))
        lw -= tab.integral_row_sum(state, t_prev, t) - (t - t_prev) * g.row_sums[state]
        lam = tab.rate_at(t, i, j)
        if lam <= 0.0:
            return -math.inf
        lw += math.log(lam / g.rates[i, j])
        t_prev, state = t, j
    lw -= tab.integral_row_sum(state, t_prev, tab.horizon) \
        - (tab.horizon - t_prev) * g.row_sums[state]
    return lw


def girsanov_logweight(model: IntensityModel, flow: Flow,
                       u: Optional[FeedbackControl], path: PathRecord,
                       v: Optional[FeedbackControl] = None) -> float:
    """Log of the controlled-vs-reference density along a recorded path.

    The path must live on the reference chain's active pairs; a jump over an
    inactive pair is an error (positivity alignment violated).
    """
    tab = rate_tables(model, flow, u, v)
    return _logweight_from_events(model, tab, path.x0, path.events)


def payoff_mc_direct(model: IntensityModel, flow: Flow,
                     u: Optional[FeedbackControl], cost: CostSpec, x0: int,
                     n_paths: int, seed: int, *, threads: int = 1,
                     v: Optional[FeedbackControl] = None) -> McEstimate:
    """Estimate E[exp(int f + h(x_T))] by sampling under the controlled rates."""
    tab = rate_tables(model, flow, u, v)
    ct = cost_tables(cost, flow, u, v)

    def run(lo, hi):
        return impl.batch_payoff_direct(
            tab.left, tab.right, tab.rs_left, tab.rs_right, tab.majorant,
            tab.dt, tab.horizon, ct.left, ct.right, ct.cum,
            x0, seed, STREAM_PATH, lo, hi)

    cost_int, x_end = _chunked(run, n_paths, threads)
    return _estimate(np.exp(cost_int + ct.terminal[x_end]), seed)


def _reference_tables(model: IntensityModel, grid: TimeGrid) -> RateTables:
    """Constant tables for the time-homogeneous reference chain."""
    g = model.g.rates
    n, size = grid.n_steps, g.shape[0]
    left = np.ascontiguousarray(np.broadcast_to(g, (n, size, size)))
    rs = np.ascontiguousarray(np.broadcast_to(model.g.row_sums, (n, size)))
    cum = np.zeros((n + 1, size))
    np.cumsum(grid.dt * rs, axis=0, out=cum[1:])
    from .fields import MAJORANT_SAFETY
    return RateTables(grid.dt, grid.horizon, left, left, rs, rs,
                      MAJORANT_SAFETY * model.g.row_sums.copy(), cum)


def payoff_mc_girsanov(model: IntensityModel, flow: Flow,
                       u: Optional[FeedbackControl], cost: CostSpec, x0: int,
                       n_paths: int, seed: int, *, threads: int = 1,
                       v: Optional[FeedbackControl] = None) -> McEstimate:
    """Estimate the payoff by reweighting reference-chain paths with L^u_T."""
    tab = rate_tables(model, flow, u, v)
    ref = _reference_tables(model, flow.grid)
    ct = cost_tables(cost, flow, u, v)

    def run(lo, hi):
        return impl.batch_girsanov(
            ref.left, ref.right, ref.rs_left, ref.rs_right, ref.majorant,
            model.g.rates, model.g.row_sums,
            tab.left, tab.right, tab.rs_left, tab.rs_right, tab.cum_rs,
            ct.left, ct.right, ct.cum, tab.dt, tab.horizon,
            x0, seed, STREAM_GIRSANOV, lo, hi)

    logw, cost_int, x_end = _chunked(run, n_paths, threads)
    return _estimate(np.exp(logw + cost_int + ct.terminal[x_end]), seed)


def girsanov_martingale_check(model: IntensityModel, flow: Flow,
                              u: Optional[FeedbackControl], x0: int,
                              n_paths: int, seed: int, *, threads: int = 1,
                              v: Optional[FeedbackControl] = None) -> McEstimate:
    """MC mean of L^u_T over reference paths (should be 1: density is a martingale)."""
    tab = rate_tables(model, flow, u, v)
    ref = _reference_tables(model, flow.grid)
    zeros = np.zeros((flow.grid.n_steps, model.n_states))
    zcum = np.zeros((flow.grid.n_steps + 1, model.n_states))

    def run(lo, hi):
        return impl.batch_girsanov(
            ref.left, ref.right, ref.rs_left, ref.rs_right, ref.majorant,
            model.g.rates, model.g.row_sums,
            tab.left, tab.right, tab.rs_left, tab.rs_right, tab.cum_rs,
            zeros, zeros, zcum, tab.dt, tab.horizon,
            x0, seed, STREAM_GIRSANOV, lo, hi)

    logw, _, _ = _chunked(run, n_paths, threads)
    return _estimate(np.exp(logw), seed)


@dataclass
class MartingaleReport:
    """Per-pair MC means of the compensated counting processes at T."""

    pairs: list
    means: np.ndarray
    std_errors: np.ndarray
    n_paths: int
    seed: int
    flag_k: float = 4.0

    @property
    def flagged(self) -> list:
        out = []
        for idx, pair in enumerate(self.pairs):
            if abs(self.means[idx]) > self.flag_k * self.std_errors[idx]:
                out.append(pair)
        return out

    @property
    def ok(self) -> bool:
        return not self.flagged

    def to_json_obj(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "means": self.means.tolist(),
            "std_errors": self.std_errors.tolist(),
            "n_paths": self.n_paths,
            "flagged": [list(p) for p in self.flagged],
        }


def martingale_diagnostic(model: IntensityModel, flow: Flow,
                          u: Optional[FeedbackControl], x0: int,
                          n_paths: int, seed: int, *, threads: int = 1,
                          v: Optional[FeedbackControl] = None) -> MartingaleReport:
    """MC means of M^u_ij(T) = N_ij(T) - int 1{x=i} lambda^u_ij dt per active pair."""
    tab = rate_tables(model, flow, u, v, pair_cumulative=True)
    pairs = model.g.active_pairs()
    pair_col = np.full((model.n_states, model.n_states), -1, dtype=np.int64)
    for c, (i, j) in enumerate(pairs):
        pair_col[i, j] = c

    def run(lo, hi):
        return (impl.batch_martingale(
            tab.left, tab.right, tab.rs_left, tab.rs_right, tab.majorant,
            tab.cum_pair, pair_col, tab.dt, tab.horizon,
            x0, seed, STREAM_MARTINGALE, lo, hi, len(pairs)),)

    (vals,) = _chunked(run, n_paths, threads)
    means = vals.mean(axis=0)
    ses = vals.std(axis=0, ddof=1) / math.sqrt(n_paths)
    return MartingaleReport(pairs, means, ses, n_paths, seed)


@dataclass
class ParticleReport:
    """Interacting-particle run summary."""

    n_particles: int
    n_events: int
    w1_terminal: Optional[float] = None

    def to_json_obj(self) -> dict:
        return {"n_particles": self.n_particles, "n_events": self.n_events,
                "w1_terminal": self.w1_terminal}


def particle_system(model: IntensityModel, u: Optional[FeedbackControl],
                    xi: Dist, n_particles: int, seed: int, grid: TimeGrid, *,
                    v: Optional[FeedbackControl] = None,
                    reference_flow: Optional[Flow] = None):
    """Simulate n interacting particles whose rates see the empirical law.

    State counts evolve by Gillespie steps; rates are refreshed after every
    jump and at every grid node (exact when the intensities carry no explicit
    time dependence inside a step, which holds for the moment-coupled
    presets). Returns the empirical marginal flow on the grid and a report
    with W1 against ``reference_flow`` at the horizon when supplied.
    """
    if n_particles < 2:
        raise ModelError("need at least two particles")
    size = model.n_states
    gen = np.random.Generator(np.random.Philox(
        key=np.array([seed & ((1 << 64) - 1), STREAM_PARTICLE << 48], dtype=np.uint64)))
    counts = gen.multinomial(n_particles, xi.probs).astype(float)
    nodes = grid.nodes()
    dists = [Dist(counts / n_particles)]
    n_events = 0
    for k in range(grid.n_steps):
        t = nodes[k]
        t_end = nodes[k + 1]
        upts = u.points_at(k) if u is not None else np.zeros((size, 1))
        vpts = v.points_at(k) if v is not None else None
        while True:
            mu_hat = Dist(counts / n_particles)
            lam = model.rate_matrix(t, mu_hat, upts, vpts)
            channel = counts[:, None] * lam
            total = float(channel.sum())
            if total <= 0.0:
                break
            wait = -math.log(1.0 - gen.random()) / total
            if t + wait >= t_end:
                break
            t += wait
            cum = np.cumsum(channel.ravel())
            idx = int(np.searchsorted(cum, gen.random() * total, side="right"))
            idx = min(idx, size * size - 1)
            i, j = divmod(idx, size)
            counts[i] -= 1.0
            counts[j] += 1.0
            n_events += 1
        dists.append(Dist(counts / n_particles))
    empirical = Flow(grid, dists)
    w1 = None
    if reference_flow is not None:
        w1 = wasserstein1(empirical.dists[-1], reference_flow.dists[-1])
    return empirical, ParticleReport(n_particles, n_events, w1)


def dump_paths_csv(path, records) -> None:
    """Write sampled paths as CSV rows (path_id, time, from, to)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "time", "from", "to"])
        for pid, rec in enumerate(records):
            for t, i, j in rec.events:
                w.writerow([pid, repr(float(t)), i, j])

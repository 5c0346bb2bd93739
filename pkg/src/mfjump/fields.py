"""Grid tabulation of rate and cost fields.

Every consumer of time-dependent data (forward/backward integrators, path
samplers, Hamiltonian sweeps) reads the same tabulated fields: values at the
grid nodes, interpolated linearly in t inside each step, with the step's
feedback control applied at both endpoints.  Keeping a single convention makes
the Monte Carlo estimators, the backward solvers and the optimizers agree to
quadrature accuracy instead of to discretization-convention accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .flows import FeedbackControl, Flow
from .model import IntensityModel

__all__ = ["RateTables", "CostTables", "rate_tables", "cost_tables"]

MAJORANT_SAFETY = 1.05


@dataclass(frozen=True)
class RateTables:
    """Per-step endpoint tabulation of the controlled rate field.

    left[k], right[k] hold the off-diagonal rate matrices at the two endpoints
    of step k (both under the step-k control); the field in force at
    t_k + s*dt is (1-s)*left[k] + s*right[k].  Cumulative arrays hold exact
    integrals of the piecewise-linear fields from 0 to each node.
    """

    dt: float
    horizon: float
    left: np.ndarray        # (n_steps, S, S)
    right: np.ndarray       # (n_steps, S, S)
    rs_left: np.ndarray     # (n_steps, S) row sums
    rs_right: np.ndarray    # (n_steps, S)
    majorant: np.ndarray    # (S,) thinning majorants
    cum_rs: np.ndarray      # (n_steps + 1, S) integral of row-sum field
    cum_pair: Optional[np.ndarray] = None  # (n_steps + 1, S, S), on demand

    @property
    def n_steps(self) -> int:
        return self.left.shape[0]

    @property
    def n_states(self) -> int:
        return self.left.shape[1]

    def with_pair_cumulative(self) -> "RateTables":
        if self.cum_pair is not None:
            return self
        steps = 0.5 * self.dt * (self.left + self.right)
        cum = np.zeros((self.n_steps + 1,) + self.left.shape[1:])
        np.cumsum(steps, axis=0, out=cum[1:])
        return RateTables(self.dt, self.horizon, self.left, self.right,
                          self.rs_left, self.rs_right, self.majorant,
                          self.cum_rs, cum)

    def locate(self, t: float):
        if t <= 0.0:
            return 0, 0.0
        k = int(t / self.dt)
        if k >= self.n_steps:
            k = self.n_steps - 1
        s = t / self.dt - k
        return k, (1.0 if s > 1.0 else s)

    def rate_at(self, t: float, i: int, j: int) -> float:
        k, s = self.locate(t)
        return self.left[k, i, j] + s * (self.right[k, i, j] - self.left[k, i, j])

    def row_sum_at(self, t: float, i: int) -> float:
        k, s = self.locate(t)
        return self.rs_left[k, i] + s * (self.rs_right[k, i] - self.rs_left[k, i])

    def integral_row_sum(self, i: int, a: float, b: float) -> float:
        """Exact integral of the total-rate field of state i over [a, b]."""
        return self._seg(self.cum_rs[:, i], self.rs_left[:, i],
                         self.rs_right[:, i], a, b)

    def integral_pair(self, i: int, j: int, a: float, b: float) -> float:
        tab = self.with_pair_cumulative() if self.cum_pair is None else self
        return tab._seg(tab.cum_pair[:, i, j], tab.left[:, i, j],
                        tab.right[:, i, j], a, b)

    def _seg(self, cum, left, right, a, b) -> float:
        return self._antider(cum, left, right, b) - self._antider(cum, left, right, a)

    def _antider(self, cum, left, right, t) -> float:
        k, s = self.locate(t)
        return cum[k] + self.dt * (left[k] * s + 0.5 * (right[k] - left[k]) * s * s)


def rate_tables(model: IntensityModel, flow: Flow,
                u: Optional[FeedbackControl],
                v: Optional[FeedbackControl] = None,
                *, pair_cumulative: bool = False) -> RateTables:
    """Tabulate the controlled rate field on the flow's grid."""
    grid = flow.grid
    n, size = grid.n_steps, model.n_states
    nodes = grid.nodes()
    left = np.empty((n, size, size))
    right = np.empty((n, size, size))

    def ctrl(k):
        upts = u.points_at(k) if u is not None else np.zeros((size, 1))
        vpts = v.points_at(k) if v is not None else None
        return upts, vpts

    prev_right = None
    for k in range(n):
        upts, vpts = ctrl(k)
        if k > 0 and _same_ctrl(u, v, k - 1, k) and prev_right is not None:
            left[k] = prev_right
        else:
            left[k] = model.rate_matrix(nodes[k], flow.dists[k], upts, vpts)
        right[k] = model.rate_matrix(nodes[k + 1], flow.dists[k + 1], upts, vpts)
        prev_right = right[k]
    rs_left = left.sum(axis=2)
    rs_right = right.sum(axis=2)
    majorant = MAJORANT_SAFETY * np.maximum(rs_left.max(axis=0), rs_right.max(axis=0))
    cum_rs = np.zeros((n + 1, size))
    np.cumsum(0.5 * grid.dt * (rs_left + rs_right), axis=0, out=cum_rs[1:])
    tables = RateTables(grid.dt, grid.horizon, left, right, rs_left, rs_right,
                        majorant, cum_rs)
    return tables.with_pair_cumulative() if pair_cumulative else tables


def _same_ctrl(u, v, k_prev, k) -> bool:
    same = u is None or np.array_equal(u.indices[k_prev], u.indices[k])
    if same and v is not None:
        same = np.array_equal(v.indices[k_prev], v.indices[k])
    return same


@dataclass(frozen=True)
class CostTables:
    """Tabulated running cost (same convention as RateTables) plus terminal cost."""

    dt: float
    horizon: float
    left: np.ndarray      # (n_steps, S)
    right: np.ndarray     # (n_steps, S)
    cum: np.ndarray       # (n_steps + 1, S)
    terminal: np.ndarray  # (S,)

    @property
    def n_steps(self) -> int:
        return self.left.shape[0]

    def locate(self, t: float):
        if t <= 0.0:
            return 0, 0.0
        k = int(t / self.dt)
        if k >= self.n_steps:
            k = self.n_steps - 1
        s = t / self.dt - k
        return k, (1.0 if s > 1.0 else s)

    def integral(self, i: int, a: float, b: float) -> float:
        """Exact integral of the state-i running-cost field over [a, b]."""
        return self._antider(i, b) - self._antider(i, a)

    def _antider(self, i, t) -> float:
        k, s = self.locate(t)
        return self.cum[k, i] + self.dt * (
            self.left[k, i] * s + 0.5 * (self.right[k, i] - self.left[k, i]) * s * s)


def cost_tables(cost, flow: Flow, u: Optional[FeedbackControl],
                v: Optional[FeedbackControl] = None) -> CostTables:
    """Tabulate a CostSpec's running cost on the flow's grid; terminal at mu_T."""
    grid = flow.grid
    n = grid.n_steps
    size = flow.n_states
    nodes = grid.nodes()
    left = np.empty((n, size))
    right = np.empty((n, size))
    for k in range(n):
        upts = u.points_at(k) if u is not None else np.zeros((size, 1))
        vpts = v.points_at(k) if v is not None else None
        left[k] = cost.f_row(nodes[k], flow.dists[k], upts, vpts)
        right[k] = cost.f_row(nodes[k + 1], flow.dists[k + 1], upts, vpts)
    cum = np.zeros((n + 1, size))
    np.cumsum(0.5 * grid.dt * (left + right), axis=0, out=cum[1:])
    terminal = cost.h_vec(flow.dists[-1], size)
    return CostTables(grid.dt, grid.horizon, left, right, cum, terminal)

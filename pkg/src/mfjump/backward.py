"""Backward solvers for the risk-sensitive value field.

With Markovian data the entropic backward equation reduces to an ODE system
over (time, state): the martingale term drops out and Z survives only as the
matrix of Y-differences.  Two independent routes are implemented and
cross-checked: the exponential-transformed linear equation (Feynman-Kac form)
and the entropic form whose driver carries tau(z) = e^z - z - 1.  The balanced
decomposition writes increments of min/max-type drivers as exact inner
products against an admissible intensity perturbation; it is what makes the
comparison results usable as tests.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .fields import CostTables, RateTables, cost_tables, rate_tables
from .flows import FeedbackControl, Flow, TimeGrid
from .model import Dist, IntensityModel, ModelError

__all__ = [
    "BsdeSolution",
    "CostSpec",
    "SolverError",
    "tau",
    "feynman_kac_backward",
    "entropic_backward",
    "balanced_decomposition",
    "balanced_weights",
    "comparison_check",
    "ComparisonReport",
]


class SolverError(RuntimeError):
    """Backward integration failed (step size / overflow)."""


def tau(z: float) -> float:
    """Entropy dual tau(z) = e^z - z - 1 (nonnegative, convex, tau(0) = 0)."""
    return math.expm1(z) - z


@dataclass(frozen=True)
class CostSpec:
    """Bounded running and terminal costs with declared sup-norm bounds.

    ``f(t, i, mu, u, v=None)`` and ``h(i, mu)`` must respect the declared
    bounds; :meth:`check_bounds` verifies them on sampled inputs (the bounds
    are hypotheses, the solver's a-priori estimate relies on them).
    """

    f: Callable
    h: Callable
    f_bound: float
    h_bound: float
    f_rows: Optional[Callable] = None
    name: str = ""

    def f_row(self, t, mu, u_rows, v_rows=None) -> np.ndarray:
        if self.f_rows is not None:
            return np.asarray(self.f_rows(t, mu, u_rows, v_rows), dtype=float)
        n = u_rows.shape[0]
        if v_rows is None:
            return np.array([self.f(t, i, mu, u_rows[i]) for i in range(n)])
        return np.array([self.f(t, i, mu, u_rows[i], v_rows[i]) for i in range(n)])

    def h_vec(self, mu, n_states: int) -> np.ndarray:
        return np.array([self.h(i, mu) for i in range(n_states)])

    def check_bounds(self, times, dists, u_points, v_points=None):
        """Largest sampled |f| and |h|; (worst_f, worst_h, ok)."""
        worst_f = 0.0
        v_list = list(v_points) if v_points is not None else [None]
        for t in times:
            for mu in dists:
                n = len(mu)
                for u in u_points:
                    for v in v_list:
                        u_rows = np.broadcast_to(np.atleast_1d(u), (n, np.atleast_1d(u).size))
                        v_rows = None if v is None else np.broadcast_to(
                            np.atleast_1d(v), (n, np.atleast_1d(v).size))
                        worst_f = max(worst_f, float(np.abs(self.f_row(t, mu, u_rows, v_rows)).max()))
        worst_h = max(float(np.abs(self.h_vec(mu, len(mu))).max()) for mu in dists)
        return worst_f, worst_h, worst_f <= self.f_bound + 1e-12 and worst_h <= self.h_bound + 1e-12


class BsdeSolution:
    """Value field of a backward solve: Y over (node, state), v = e^Y, Z = Y-differences."""

    __slots__ = ("grid", "Y", "v", "_Z")

    def __init__(self, grid: TimeGrid, Y: np.ndarray):
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != grid.n_nodes:
            raise ModelError("Y must have one row per grid node")
        self.grid = grid
        self.Y = Y
        self.v = np.exp(Y)
        self._Z = None
        self.Y.flags.writeable = False
        self.v.flags.writeable = False

    @property
    def Z(self) -> np.ndarray:
        """(n_nodes, S, S) array with Z[k, i, j] = Y[k, j] - Y[k, i]."""
        if self._Z is None:
            self._Z = self.Y[:, None, :] - self.Y[:, :, None]
            self._Z.flags.writeable = False
        return self._Z

    def z_rows(self, k: int) -> np.ndarray:
        return self.Y[k][None, :] - self.Y[k][:, None]

    @property
    def n_states(self) -> int:
        return self.Y.shape[1]

    def value(self, k: int, i: int) -> float:
        return float(self.v[k, i])

    def check_redundancy(self) -> float:
        """Max |Z - (Y_j - Y_i)| over nodes (stored-redundantly invariant)."""
        return float(np.abs(self.Z - (self.Y[:, None, :] - self.Y[:, :, None])).max())

    def apriori_bound(self, cost: CostSpec) -> float:
        return cost.h_bound + self.grid.horizon * cost.f_bound

    def sup_diff(self, other: "BsdeSolution") -> float:
        return float(np.abs(self.Y - other.Y).max())

    def to_json_obj(self) -> dict:
        return {
            "horizon": self.grid.horizon,
            "n_steps": self.grid.n_steps,
            "Y": self.Y.tolist(),
        }

    @classmethod
    def from_json_obj(cls, obj) -> "BsdeSolution":
        return cls(TimeGrid(obj["horizon"], obj["n_steps"]), np.asarray(obj["Y"]))

    def write_csv(self, path) -> None:
        nodes = self.grid.nodes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "state", "Y", "v"])
            for k, t in enumerate(nodes):
                for i in range(self.n_states):
                    w.writerow([repr(float(t)), i,
                                repr(float(self.Y[k, i])), repr(float(self.v[k, i]))])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh)


def _rk4_backward(y_term, n_steps, dt, rhs):
    """Integrate dY/dt = -rhs(k, s, Y) from t_n back to t_0; returns (n_nodes, S)."""
    out = np.empty((n_steps + 1,) + y_term.shape)
    out[n_steps] = y_term
    y = y_term
    h = -dt
    for k in range(n_steps - 1, -1, -1):
        k1 = -rhs(k, 1.0, y)
        k2 = -rhs(k, 0.5, y + 0.5 * h * k1)
        k3 = -rhs(k, 0.5, y + 0.5 * h * k2)
        k4 = -rhs(k, 0.0, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
    return out


def rk4_linear_step_back(v, dt, lam_l, lam_r, rs_l, rs_r, f_l, f_r):
    """One backward RK4 step of -dv/dt = f v + Lambda v - rowsum v on one step.

    The fields interpolate linearly from the (left, right) endpoint arrays.
    Shared by the plain solver and the optimized sweeps so that re-solving
    under a frozen argmin control reproduces the sweep bit for bit.
    """
    def rhs(s, vv):
        lam = lam_l + s * (lam_r - lam_l)
        rs = rs_l + s * (rs_r - rs_l)
        f = f_l + s * (f_r - f_l)
        return f * vv + lam @ vv - rs * vv

    h = -dt
    k1 = -rhs(1.0, v)
    k2 = -rhs(0.5, v + 0.5 * h * k1)
    k3 = -rhs(0.5, v + 0.5 * h * k2)
    k4 = -rhs(0.0, v + h * k3)
    return v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def linear_backward_field(rates: RateTables, costs: CostTables) -> np.ndarray:
    """Solve -dv/dt = diag(f) v + Lambda-generator v backward from v_T = exp(h).

    Returns the (n_nodes, S) array of v values.
    """
    n = rates.n_steps
    table = np.empty((n + 1, rates.n_states))
    table[n] = np.exp(costs.terminal)
    for k in range(n - 1, -1, -1):
        table[k] = rk4_linear_step_back(
            table[k + 1], rates.dt, rates.left[k], rates.right[k],
            rates.rs_left[k], rates.rs_right[k], costs.left[k], costs.right[k])
    if table.min() <= 0.0:
        k, i = np.unravel_index(int(table.argmin()), table.shape)
        raise SolverError(
            "nonpositive value %.3e at node %d state %d; decrease the step size"
            % (table.min(), k, i))
    return table


def feynman_kac_backward(model: IntensityModel, flow: Flow,
                         u: Optional[FeedbackControl], cost: CostSpec,
                         v: Optional[FeedbackControl] = None) -> BsdeSolution:
    """Linear (exponential-transformed) backward solve; Y = ln v, Z from Y."""
    rates = rate_tables(model, flow, u, v)
    costs = cost_tables(cost, flow, u, v)
    vtab = linear_backward_field(rates, costs)
    return BsdeSolution(flow.grid, np.log(vtab))


_EXP_CAP = 700.0


def entropic_backward(model: IntensityModel, flow: Flow,
                      u: Optional[FeedbackControl], cost: CostSpec,
                      v: Optional[FeedbackControl] = None,
                      g_override: Optional[np.ndarray] = None) -> BsdeSolution:
    """Entropic-form backward solve.

    Integrates -dY_i/dt = H(t, i, Z_i.) + sum_j g_ij (e^{Z_ij} - 1) with
    H = f + <(lambda - g), e^z - 1> and Z_ij = Y_j - Y_i; the Markovian form of
    the entropic equation after absorbing the martingale compensator.
    ``g_override`` replaces the reference rates in the split between the two
    terms (used by the verify command's fault-injection hook; the split is a
    telescoping identity, so any mismatch with the model's g breaks nothing
    mathematically but is exactly what the injected-violation check perturbs).
    """
    rates = rate_tables(model, flow, u, v)
    costs = cost_tables(cost, flow, u, v)
    g = g_override if g_override is not None else model.g.rates
    n = rates.n_steps

    def rhs(k, s, y):
        z = y[None, :] - y[:, None]
        if z.max() > _EXP_CAP:
            ii = np.unravel_index(int(z.argmax()), z.shape)
            raise SolverError("overflow in e^Z at step %d pair %r" % (k, ii))
        ez1 = np.exp(z)
        np.fill_diagonal(ez1, 1.0)
        ez1 -= 1.0
        lam = rates.left[k] + s * (rates.right[k] - rates.left[k])
        f = costs.left[k] + s * (costs.right[k] - costs.left[k])
        ham = f + ((lam - g) * ez1).sum(axis=1)
        entropic = (g * ez1).sum(axis=1)
        return ham + entropic

    return BsdeSolution(flow.grid, _rk4_backward(costs.terminal, n, rates.dt, rhs))


class BalancedDecompositionError(ValueError):
    """Family is inconsistent with the sandwich bounds."""


def balanced_weights(f_z: float, f_zbar: float, ell_min: np.ndarray,
                     ell_max: np.ndarray, z: np.ndarray, zbar: np.ndarray,
                     g_row: np.ndarray):
    """Core of the balanced decomposition from coordinatewise family extremes.

    Returns (ell_hat, residual) with F(z) - F(zbar) = <ell_hat, z - zbar>_g up
    to the residual; ell_hat is a convex combination of the sign-pattern rows
    built from ell_min/ell_max, so it inherits 1 + ell > 0 from the family.
    """
    z = np.asarray(z, dtype=float)
    zbar = np.asarray(zbar, dtype=float)
    delta = z - zbar
    if not np.any(delta != 0.0):
        return ell_min.copy(), 0.0
    lower = np.where(delta > 0.0, ell_min, ell_max)
    upper = np.where(delta < 0.0, ell_min, ell_max)
    ip_low = float(np.sum(lower * delta * g_row))
    ip_up = float(np.sum(upper * delta * g_row))
    diff = f_z - f_zbar
    num = diff - ip_low
    den = ip_up - ip_low
    if den == 0.0:
        if abs(num) > 1e-12:
            raise BalancedDecompositionError(
                "zero denominator with residual %.3e (sandwich violated)" % num)
        alpha = 0.0
    else:
        alpha = num / den
        if alpha < -1e-9 or alpha > 1.0 + 1e-9:
            raise BalancedDecompositionError("mixing weight %.3e outside [0,1]" % alpha)
        alpha = min(1.0, max(0.0, alpha))
    ell_hat = alpha * upper + (1.0 - alpha) * lower
    residual = abs(diff - float(np.sum(ell_hat * delta * g_row)))
    return ell_hat, residual


def balanced_decomposition(ell_family, f_family, y: float, z, zbar, g_row,
                           mode: str = "min"):
    """Balanced decomposition of F(z) = min/max_a {y f_a + <ell_a, z>_g}.

    Returns (ell_hat, residual). The same coordinatewise-extremes construction
    serves the game drivers: pass the product family and compose F externally
    via :func:`balanced_weights`.
    """
    ells = np.atleast_2d(np.asarray(ell_family, dtype=float))
    fs = np.asarray(f_family, dtype=float)
    g_row = np.asarray(g_row, dtype=float)
    if ells.shape[0] != fs.size:
        raise ModelError("family sizes disagree")
    if mode not in ("min", "max"):
        raise ModelError("mode must be 'min' or 'max'")
    agg = np.min if mode == "min" else np.max

    def f_of(zz):
        return float(agg(y * fs + (ells * (np.asarray(zz) * g_row)).sum(axis=1)))

    return balanced_weights(f_of(z), f_of(zbar), ells.min(axis=0), ells.max(axis=0),
                            z, zbar, g_row)


@dataclass
class ComparisonReport:
    """Node-wise ordering check between two solutions."""

    ok: bool
    min_margin: float
    worst_node: tuple

    def to_json_obj(self):
        return {"ok": self.ok, "min_margin": self.min_margin,
                "worst_node": list(self.worst_node)}


def comparison_check(sol1: BsdeSolution, sol2: BsdeSolution,
                     terminal_margins=None, driver_margins=None,
                     tol: float = 1e-10) -> ComparisonReport:
    """Assert Y1 >= Y2 - tol node-wise, given caller-certified ordered inputs.

    ``terminal_margins`` / ``driver_margins`` are the caller's certification
    samples (h1 - h2 pointwise, driver1 - driver2 on sampled arguments); they
    must be nonnegative or the premise of the comparison does not apply.
    """
    for name, cert in (("terminal", terminal_margins), ("driver", driver_margins)):
        if cert is not None and np.asarray(cert).size and np.asarray(cert).min() < -1e-12:
            raise ModelError("%s certification violated: min margin %.3e"
                             % (name, float(np.asarray(cert).min())))
    margins = sol1.Y - sol2.Y
    k, i = np.unravel_index(int(margins.argmin()), margins.shape)
    worst = (int(k), int(i))
    return ComparisonReport(bool(margins.min() >= -tol), float(margins.min()), worst)

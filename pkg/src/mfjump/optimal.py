"""Pointwise Hamiltonian minimization and the mean-field consistency loop.

The candidate optimal feedback is built by a best-response iteration: freeze
the flow, sweep backward choosing the grid argmin of the Hamiltonian at each
(step, state) decision point, re-solve the mean-field fixed point under the
recorded feedback, and repeat until the flow stops moving.  Decisions are
taken at the right node of each step (where the backward state is already
final), so the swept value field coincides exactly with the plain backward
solve under the recorded control, and the Hamiltonian gap at the decision
points is zero by construction.  The verification sweep then bounds the
candidate against random feedback controls, each with its own consistent flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backward import BsdeSolution, CostSpec, feynman_kac_backward, rk4_linear_step_back
from .flows import ConvergenceError, FeedbackControl, Flow, TimeGrid, picard_fixed_point
from .model import ControlGrid, Dist, IntensityModel, ModelError

__all__ = [
    "OptimalControlResult",
    "OptimalityReport",
    "OscillationError",
    "hamiltonian",
    "hamiltonian_min",
    "solve_optimal",
    "verify_optimality",
]


class OscillationError(ConvergenceError):
    """Outer loop entered a 2-cycle in flows (reported distinctly)."""


def hamiltonian(model: IntensityModel, mu: Dist, t: float, i: int, u_point,
                z_row, cost: CostSpec, v_point=None) -> float:
    """H(t, i, u, z) = f(t, i, mu, u) + sum_j (e^{z_j} - 1)(lambda_ij - g_ij).

    ``z_row`` is indexed by destination state; its i-th entry is ignored
    (forced to zero).
    """
    z = np.asarray(z_row, dtype=float).copy()
    z[i] = 0.0
    lam = model.rate_matrix(t, mu, np.atleast_1d(u_point),
                            None if v_point is None else np.atleast_1d(v_point))
    u_rows = np.broadcast_to(np.atleast_1d(u_point),
                             (model.n_states, np.atleast_1d(u_point).size))
    v_rows = None
    if v_point is not None:
        v_rows = np.broadcast_to(np.atleast_1d(v_point),
                                 (model.n_states, np.atleast_1d(v_point).size))
    f = float(cost.f_row(t, mu, u_rows, v_rows)[i])
    ez1 = np.expm1(z)
    ez1[i] = 0.0
    return f + float(np.dot(ez1, lam[i] - model.g.rates[i]))


def hamiltonian_min(model: IntensityModel, mu: Dist, t: float, i: int,
                    z_row, grid: ControlGrid, cost: CostSpec, v_point=None):
    """Exhaustive minimum of H over the control grid; ties take the lowest index.

    Returns (H*, argmin point, argmin index).
    """
    values = [hamiltonian(model, mu, t, i, grid.points[a], z_row, cost, v_point)
              for a in range(grid.n_points)]
    idx = int(np.argmin(values))
    return values[idx], grid.points[idx], idx


def node_control_tables(model: IntensityModel, flow: Flow, grid_u: ControlGrid,
                        cost: CostSpec, grid_v: Optional[ControlGrid] = None):
    """Rates and running costs at every node for every (product) grid point.

    Returns (lam, f) with shapes (nU[, nV], n_nodes, S, S) and
    (nU[, nV], n_nodes, S). Row i of a constant-control table equals the row
    the mixed-feedback tabulation would produce when state i carries that
    point, because intensities and costs read the control at the current
    state only.
    """
    nodes = flow.grid.nodes()
    size = model.n_states
    n_nodes = flow.grid.n_nodes
    v_pts = [None] if grid_v is None else list(grid_v.points)
    shape_head = (grid_u.n_points,) if grid_v is None else (grid_u.n_points, grid_v.n_points)
    lam = np.empty(shape_head + (n_nodes, size, size))
    f = np.empty(shape_head + (n_nodes, size))
    for a in range(grid_u.n_points):
        for bi, vp in enumerate(v_pts):
            sel = (a,) if grid_v is None else (a, bi)
            u_rows = np.broadcast_to(grid_u.points[a], (size, grid_u.dim))
            v_rows = None if vp is None else np.broadcast_to(vp, (size, len(vp)))
            for m in range(n_nodes):
                lam[sel + (m,)] = model.rate_matrix(nodes[m], flow.dists[m],
                                                    u_rows, v_rows)
                f[sel + (m,)] = cost.f_row(nodes[m], flow.dists[m], u_rows, v_rows)
    return lam, f


def hamiltonian_profile(y_next, lam_node, f_node, g_rates):
    """H per family member and state at one node, from the backward state there.

    ``lam_node``/``f_node`` carry leading family axes; returns H with the same
    leading axes and a trailing state axis.
    """
    z = y_next[None, :] - y_next[:, None]
    ez1 = np.exp(z)
    np.fill_diagonal(ez1, 1.0)
    ez1 -= 1.0
    return f_node + ((lam_node - g_rates) * ez1).sum(axis=-1)


def backward_sweep(model: IntensityModel, flow: Flow, lam, f, h_vec, decider):
    """Backward pass with per-step decisions at the right node.

    ``decider`` maps the Hamiltonian profile (family axes..., S) to index
    arrays (one (S,) array per family axis). The chosen family member's field
    is frozen over the step and integrated with the shared linear RK4 step.
    Returns (Y table, tuple of index tables).
    """
    grid = flow.grid
    n = grid.n_steps
    size = model.n_states
    g = model.g.rates
    states = np.arange(size)
    vtab = np.empty((n + 1, size))
    vtab[n] = np.exp(h_vec)
    n_axes = lam.ndim - 3
    idx_tables = tuple(np.empty((n, size), dtype=np.int64) for _ in range(n_axes))
    y = h_vec.copy()
    for k in range(n - 1, -1, -1):
        ham = hamiltonian_profile(y, lam[..., k + 1, :, :], f[..., k + 1, :], g)
        chosen = decider(ham)
        for ax, tbl in enumerate(idx_tables):
            tbl[k] = chosen[ax]
        # gather per-state rows of the chosen member at both step endpoints
        sel = chosen + (states,)
        lam_l = lam[..., k, :, :][sel]
        lam_r = lam[..., k + 1, :, :][sel]
        f_l = f[..., k, :][sel]
        f_r = f[..., k + 1, :][sel]
        vtab[k] = rk4_linear_step_back(
            vtab[k + 1], grid.dt, lam_l, lam_r,
            lam_l.sum(axis=1), lam_r.sum(axis=1), f_l, f_r)
        y = np.log(vtab[k])
    return np.log(vtab), idx_tables


def _argmin_decider(ham):
    return (np.argmin(ham, axis=0),)


@dataclass
class OptimalControlResult:
    """Converged candidate optimal feedback with its certificates."""

    u_star: FeedbackControl
    flow_star: Flow
    sol_star: BsdeSolution
    consistency_gap: float
    hamiltonian_gap: float
    terminal_gap: float
    n_outer: int
    outer_history: list
    x0: int

    @property
    def value_at_start(self) -> float:
        return float(self.sol_star.Y[0, self.x0])

    def to_json_obj(self) -> dict:
        return {
            "u_star": self.u_star.to_json_obj(),
            "Y": self.sol_star.Y.tolist(),
            "consistency_gap": self.consistency_gap,
            "hamiltonian_gap": self.hamiltonian_gap,
            "terminal_gap": self.terminal_gap,
            "n_outer": self.n_outer,
            "outer_history": list(self.outer_history),
            "value_at_start": self.value_at_start,
        }


def _consistency_loop(model, grid, xi, tol, max_outer, picard_tol, picard_max_iter,
                      damping, make_tables, run_sweep, make_controls):
    """Shared best-response outer loop for the control and game solvers.

    ``make_tables(flow)`` tabulates per-grid-point fields, ``run_sweep``
    performs the backward pass, ``make_controls`` turns index tables into
    feedback controls (returning (u,) or (u, v)).
    """
    controls = make_controls(
        tuple(np.zeros((grid.n_steps, model.n_states), dtype=np.int64)
              for _ in range(make_controls.n_axes)))
    flow, _ = picard_fixed_point(
        model, controls[0], xi, grid,
        v=controls[1] if len(controls) > 1 else None,
        tol=picard_tol, max_iter=picard_max_iter, damping=damping)
    history = []
    prev_flow = None
    for it in range(1, max_outer + 1):
        tables = make_tables(flow)
        ytab, idx = run_sweep(flow, tables)
        controls = make_controls(idx)
        new_flow, _ = picard_fixed_point(
            model, controls[0], xi, grid,
            v=controls[1] if len(controls) > 1 else None,
            tol=picard_tol, max_iter=picard_max_iter, damping=damping,
            initial=flow)
        d = flow.sup_distance(new_flow)
        history.append(d)
        if d < tol:
            tables2 = make_tables(new_flow)
            ytab2, idx2 = run_sweep(new_flow, tables2)
            if all(np.array_equal(a, b) for a, b in zip(idx, idx2)):
                return make_controls(idx2), new_flow, ytab2, d, it, history, tables2
        else:
            if prev_flow is not None and new_flow.sup_distance(prev_flow) < tol:
                raise OscillationError(
                    "outer loop oscillates between two flows (2-cycle at "
                    "iteration %d)" % it, history)
        prev_flow = flow
        flow = new_flow
    raise ConvergenceError(
        "consistency loop did not converge in %d iterations" % max_outer, history)


def solve_optimal(model: IntensityModel, grid_u: ControlGrid, cost: CostSpec,
                  xi: Dist, x0: int, grid: TimeGrid, *,
                  tol: float = 1e-6, max_outer: int = 60,
                  picard_tol: float = 1e-9, picard_max_iter: int = 300,
                  damping: float = 0.0) -> OptimalControlResult:
    """Candidate optimal feedback via argmin sweeps + mean-field consistency.

    Converges when the fixed-point flow of the recorded argmin feedback stops
    moving (sup-W2 below tol) and a re-sweep reproduces the same feedback.
    """
    if not tol > 0:
        raise ModelError("tol must be positive")

    def make_tables(flow):
        return node_control_tables(model, flow, grid_u, cost)

    def run_sweep(flow, tables):
        lam, f = tables
        h_vec = cost.h_vec(flow.dists[-1], model.n_states)
        ytab, idx = backward_sweep(model, flow, lam, f, h_vec, _argmin_decider)
        return ytab, idx

    def make_controls(idx):
        return (FeedbackControl(grid_u, idx[0]),)

    make_controls.n_axes = 1
    controls, flow, ytab, d, n_outer, history, tables = _consistency_loop(
        model, grid, xi, tol, max_outer, picard_tol, picard_max_iter,
        damping, make_tables, run_sweep, make_controls)
    u_star = controls[0]
    sol = BsdeSolution(grid, ytab)
    lam, f = tables
    ham_gap = _decision_gap(model, sol, lam, f, (u_star.indices,), _argmin_decider)
    h_vec = cost.h_vec(flow.dists[-1], model.n_states)
    terminal_gap = float(np.abs(sol.Y[-1] - h_vec).max())
    return OptimalControlResult(u_star, flow, sol, d, ham_gap, terminal_gap,
                                n_outer, history, x0)


def _decision_gap(model, sol, lam, f, idx_tables, decider):
    """Largest H(chosen) - min/saddle H over the decision nodes (0 by construction)."""
    g = model.g.rates
    size = model.n_states
    states = np.arange(size)
    gap = 0.0
    n = idx_tables[0].shape[0]
    for k in range(n):
        ham = hamiltonian_profile(sol.Y[k + 1], lam[..., k + 1, :, :],
                                  f[..., k + 1, :], g)
        chosen = tuple(tbl[k] for tbl in idx_tables)
        best = decider(ham)
        h_chosen = ham[chosen + (states,)]
        h_best = ham[best + (states,)]
        gap = max(gap, float(np.abs(h_chosen - h_best).max()))
    return gap


@dataclass
class OptimalityReport:
    """Verification of the candidate against recomputation and a control sweep."""

    recompute_gap: float
    min_slack_nodewise: float
    min_slack_at_start: float
    n_controls: int
    failures: list = field(default_factory=list)
    tol: float = 1e-6

    @property
    def ok(self) -> bool:
        return (self.recompute_gap < 1e-8
                and self.min_slack_nodewise >= -self.tol
                and self.min_slack_at_start >= -self.tol
                and not self.failures)

    def to_json_obj(self) -> dict:
        return {
            "recompute_gap": self.recompute_gap,
            "min_slack_nodewise": self.min_slack_nodewise,
            "min_slack_at_start": self.min_slack_at_start,
            "n_controls": self.n_controls,
            "failures": self.failures,
            "ok": self.ok,
        }


def random_feedback(grid_points: ControlGrid, n_steps: int, n_states: int,
                    rng: np.random.Generator) -> FeedbackControl:
    idx = rng.integers(0, grid_points.n_points, size=(n_steps, n_states))
    return FeedbackControl(grid_points, idx)


def verify_optimality(model: IntensityModel, result: OptimalControlResult,
                      grid_u: ControlGrid, cost: CostSpec, xi: Dist,
                      n_random_controls: int, seed: int, *,
                      tol: float = 1e-6, picard_tol: float = 1e-9,
                      picard_max_iter: int = 300,
                      include_grid_controls: bool = True) -> OptimalityReport:
    """Check the optimality conditions of the converged candidate.

    (i) the plain backward solve under (u*, flow*) must reproduce Y*;
    (ii) Y* <= Y^u + tol node-wise (and at (0, x0)) for every constant grid
    control and ``n_random_controls`` random feedback controls, each with its
    own consistent flow.
    """
    grid = result.flow_star.grid
    sol_re = feynman_kac_backward(model, result.flow_star, result.u_star, cost)
    recompute_gap = result.sol_star.sup_diff(sol_re)
    controls = []
    if include_grid_controls:
        for a in range(grid_u.n_points):
            controls.append(("grid[%d]" % a, FeedbackControl.constant(
                grid_u, a, grid.n_steps, model.n_states)))
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed & ((1 << 64) - 1), 7 << 48], dtype=np.uint64)))
    for r in range(n_random_controls):
        controls.append(("random[%d]" % r, random_feedback(
            grid_u, grid.n_steps, model.n_states, rng)))
    min_node = np.inf
    min_start = np.inf
    failures = []
    for name, uc in controls:
        flow_u, _ = picard_fixed_point(model, uc, xi, grid, tol=picard_tol,
                                       max_iter=picard_max_iter)
        sol_u = feynman_kac_backward(model, flow_u, uc, cost)
        margins = sol_u.Y - result.sol_star.Y
        node_margin = float(margins.min())
        start_margin = float(sol_u.Y[0, result.x0] - result.sol_star.Y[0, result.x0])
        min_node = min(min_node, node_margin)
        min_start = min(min_start, start_margin)
        if node_margin < -tol or start_margin < -tol:
            k, i = np.unravel_index(int(margins.argmin()), margins.shape)
            failures.append({"control": name, "node": [int(k), int(i)],
                             "margin": node_margin})
    return OptimalityReport(recompute_gap, float(min_node), float(min_start),
                            len(controls), failures, tol)

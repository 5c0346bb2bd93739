"""Zero-sum risk-sensitive game on finite control grids.

The minimizing player picks u, the maximizing player picks v.  Lower and
upper Hamiltonians are exhaustive max-min / min-max over the product grid
(pure strategies); the game has a numerically certified value when the two
value fields produced by the lower- and upper-game consistency loops agree,
which is checked rather than assumed.  When no pure saddle exists at some
node the result carries a "no value at grid resolution" flag and only the
ordering of the two fields is asserted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backward import BsdeSolution, CostSpec, feynman_kac_backward
from .flows import FeedbackControl, Flow, TimeGrid, picard_fixed_point
from .model import ControlGrid, Dist, IntensityModel, ModelError
from .optimal import (_consistency_loop, backward_sweep, hamiltonian,
                      hamiltonian_profile, node_control_tables, random_feedback)

__all__ = [
    "GameResult",
    "SaddleReport",
    "IsaacsReport",
    "lower_upper_hamiltonians",
    "isaacs_check",
    "solve_game",
    "verify_saddle",
]


def _lower_decide(ham):
    """Max-min over (u, v) axes: inner min over u, outer max over v."""
    inner = ham.min(axis=0)                      # (nV, S)
    astar = ham.argmin(axis=0)                   # (nV, S)
    bhat = inner.argmax(axis=0)                  # (S,)
    states = np.arange(ham.shape[-1])
    return astar[bhat, states], bhat


def _upper_decide(ham):
    """Min-max over (u, v): inner max over v, outer min over u."""
    inner = ham.max(axis=1)                      # (nU, S)
    bstar = ham.argmax(axis=1)                   # (nU, S)
    ahat = inner.argmin(axis=0)                  # (S,)
    states = np.arange(ham.shape[-1])
    return ahat, bstar[ahat, states]


def _lower_value(ham):
    return ham.min(axis=0).max(axis=0)


def _upper_value(ham):
    return ham.max(axis=1).min(axis=0)


def lower_upper_hamiltonians(model: IntensityModel, mu: Dist, t: float, i: int,
                             z_row, grid_u: ControlGrid, grid_v: ControlGrid,
                             cost: CostSpec):
    """Exhaustive max-min and min-max of H over the product grid at one point.

    Returns (H_low, (u, v) attaining the max-min, H_up, (u, v) attaining the
    min-max); ties are broken by the lowest grid index.
    """
    ham = np.empty((grid_u.n_points, grid_v.n_points))
    for a in range(grid_u.n_points):
        for b in range(grid_v.n_points):
            ham[a, b] = hamiltonian(model, mu, t, i, grid_u.points[a], z_row,
                                    cost, grid_v.points[b])
    h3 = ham[:, :, None]
    ah, bh = _lower_decide(h3)
    au, bu = _upper_decide(h3)
    low = float(_lower_value(h3)[0])
    up = float(_upper_value(h3)[0])
    return (low, (grid_u.points[int(ah[0])], grid_v.points[int(bh[0])]),
            up, (grid_u.points[int(au[0])], grid_v.points[int(bu[0])]))


@dataclass
class IsaacsReport:
    """Gap between the lower and upper Hamiltonians along a candidate solution."""

    gap: float
    worst_node: tuple
    terminal_gap: float
    profile: list

    @property
    def ok(self) -> bool:
        return self.gap >= 0.0

    def to_json_obj(self) -> dict:
        return {"gap": self.gap, "worst_node": list(self.worst_node),
                "terminal_gap": self.terminal_gap, "profile": self.profile}


def isaacs_check(model: IntensityModel, flow: Flow, grid_u: ControlGrid,
                 grid_v: ControlGrid, cost: CostSpec, z_field: BsdeSolution,
                 tables=None) -> IsaacsReport:
    """sup-node |H_low - H_up| at the supplied Z plus the terminal minimax gap.

    The terminal costs carry no direct control dependence under a frozen flow,
    so the terminal gap is zero whenever h is a plain function of (state, law);
    it is computed anyway for the general contract.
    """
    if tables is None:
        tables = node_control_tables(model, flow, grid_u, cost, grid_v)
    lam, f = tables
    g = model.g.rates
    gap = 0.0
    worst = (0, 0)
    profile = []
    for m in range(flow.grid.n_nodes):
        ham = hamiltonian_profile(z_field.Y[m], lam[:, :, m], f[:, :, m], g)
        node_gap = np.abs(_lower_value(ham) - _upper_value(ham))
        profile.append(float(node_gap.max()))
        if profile[-1] > gap:
            gap = profile[-1]
            worst = (m, int(node_gap.argmax()))
    # h carries no direct (u, v) argument, so max-min and min-max of the
    # terminal cost coincide under the frozen flow.
    terminal_gap = 0.0
    return IsaacsReport(gap, worst, terminal_gap, profile)


@dataclass
class GameResult:
    """Lower/upper game solves with the Isaacs certificate."""

    u_hat: FeedbackControl
    v_hat: FeedbackControl
    flow_hat: Flow
    sol: BsdeSolution
    sol_upper: BsdeSolution
    flow_upper: Flow
    u_upper: FeedbackControl
    v_upper: FeedbackControl
    isaacs: IsaacsReport
    value_gap: float
    no_value_at_grid: bool
    consistency_gap: float
    n_outer: int
    outer_history: list
    x0: int

    @property
    def isaacs_gap(self) -> float:
        return self.isaacs.gap

    @property
    def value_at_start(self) -> float:
        return float(self.sol.Y[0, self.x0])

    def to_json_obj(self) -> dict:
        return {
            "u_hat": self.u_hat.to_json_obj(),
            "v_hat": self.v_hat.to_json_obj(),
            "Y": self.sol.Y.tolist(),
            "Y_upper": self.sol_upper.Y.tolist(),
            "isaacs_gap": self.isaacs.gap,
            "isaacs_profile": self.isaacs.profile,
            "value_gap": self.value_gap,
            "no_value_at_grid": self.no_value_at_grid,
            "consistency_gap": self.consistency_gap,
            "n_outer": self.n_outer,
            "outer_history": list(self.outer_history),
            "value_at_start": self.value_at_start,
        }


def _solve_side(model, grid_u, grid_v, cost, xi, grid, decider, tol, max_outer,
                picard_tol, picard_max_iter, damping):
    def make_tables(flow):
        return node_control_tables(model, flow, grid_u, cost, grid_v)

    def run_sweep(flow, tables):
        lam, f = tables
        h_vec = cost.h_vec(flow.dists[-1], model.n_states)
        return backward_sweep(model, flow, lam, f, h_vec, decider)

    def make_controls(idx):
        return (FeedbackControl(grid_u, idx[0]), FeedbackControl(grid_v, idx[1]))

    make_controls.n_axes = 2
    return _consistency_loop(model, grid, xi, tol, max_outer, picard_tol,
                             picard_max_iter, damping, make_tables, run_sweep,
                             make_controls)


def solve_game(model: IntensityModel, grid_u: ControlGrid, grid_v: ControlGrid,
               cost: CostSpec, xi: Dist, x0: int, grid: TimeGrid, *,
               tol: float = 1e-6, max_outer: int = 60,
               picard_tol: float = 1e-9, picard_max_iter: int = 300,
               damping: float = 0.0) -> GameResult:
    """Solve the lower (max-min) and upper (min-max) games and certify a value.

    Both sides run the same consistency loop as the control solver with the
    pointwise argmin replaced by the saddle selection. The Isaacs gap is
    evaluated at the lower solution's Z; when it exceeds ``tol`` the result is
    flagged "no value at grid resolution" and only the ordering of the two
    value fields is guaranteed.
    """
    (u_hat, v_hat), flow_low, ylow, d_low, n_outer, history, tables_low = _solve_side(
        model, grid_u, grid_v, cost, xi, grid, _lower_decide, tol, max_outer,
        picard_tol, picard_max_iter, damping)
    (u_up, v_up), flow_up, yup, d_up, _, _, _ = _solve_side(
        model, grid_u, grid_v, cost, xi, grid, _upper_decide, tol, max_outer,
        picard_tol, picard_max_iter, damping)
    sol_low = BsdeSolution(grid, ylow)
    sol_up = BsdeSolution(grid, yup)
    isaacs = isaacs_check(model, flow_low, grid_u, grid_v, cost, sol_low,
                          tables=tables_low)
    value_gap = sol_low.sup_diff(sol_up)
    return GameResult(
        u_hat=u_hat, v_hat=v_hat, flow_hat=flow_low, sol=sol_low,
        sol_upper=sol_up, flow_upper=flow_up, u_upper=u_up, v_upper=v_up,
        isaacs=isaacs, value_gap=value_gap,
        no_value_at_grid=bool(isaacs.gap >= tol),
        consistency_gap=max(d_low, d_up), n_outer=n_outer,
        outer_history=history, x0=x0)


@dataclass
class SaddleReport:
    """Unilateral-deviation margins around the candidate saddle."""

    worst_lower_margin: float
    worst_upper_margin: float
    n_deviations: int
    failures: list = field(default_factory=list)
    tol: float = 1e-6

    @property
    def ok(self) -> bool:
        return (self.worst_lower_margin >= -self.tol
                and self.worst_upper_margin >= -self.tol)

    def to_json_obj(self) -> dict:
        return {
            "worst_lower_margin": self.worst_lower_margin,
            "worst_upper_margin": self.worst_upper_margin,
            "n_deviations": self.n_deviations,
            "failures": self.failures,
            "ok": self.ok,
        }


def verify_saddle(model: IntensityModel, result: GameResult,
                  grid_u: ControlGrid, grid_v: ControlGrid, cost: CostSpec,
                  xi: Dist, n_deviations: int, seed: int, *,
                  tol: float = 1e-6, picard_tol: float = 1e-9,
                  picard_max_iter: int = 300) -> SaddleReport:
    """Check Y^{u_hat, v}(0) <= Y(0) <= Y^{u, v_hat}(0) over random deviations.

    Each unilateral deviation gets its own consistent flow. Margins are
    reported from the starting node; negative beyond ``tol`` fails.
    """
    grid = result.flow_hat.grid
    y0 = result.sol.Y[0, result.x0]
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed & ((1 << 64) - 1), 8 << 48], dtype=np.uint64)))
    worst_up = np.inf   # deviations of the minimizer should not beat the value
    worst_low = np.inf  # deviations of the maximizer should not beat it either
    failures = []
    for r in range(n_deviations):
        u_dev = random_feedback(grid_u, grid.n_steps, model.n_states, rng)
        flow_d, _ = picard_fixed_point(model, u_dev, xi, grid, v=result.v_hat,
                                       tol=picard_tol, max_iter=picard_max_iter)
        sol_d = feynman_kac_backward(model, flow_d, u_dev, cost, v=result.v_hat)
        margin = float(sol_d.Y[0, result.x0] - y0)
        worst_up = min(worst_up, margin)
        if margin < -tol:
            failures.append({"deviation": "u[%d]" % r, "margin": margin})
        v_dev = random_feedback(grid_v, grid.n_steps, model.n_states, rng)
        flow_d, _ = picard_fixed_point(model, result.u_hat, xi, grid, v=v_dev,
                                       tol=picard_tol, max_iter=picard_max_iter)
        sol_d = feynman_kac_backward(model, flow_d, result.u_hat, cost, v=v_dev)
        margin = float(y0 - sol_d.Y[0, result.x0])
        worst_low = min(worst_low, margin)
        if margin < -tol:
            failures.append({"deviation": "v[%d]" % r, "margin": margin})
    if n_deviations == 0:
        worst_low = worst_up = 0.0
    return SaddleReport(float(worst_low), float(worst_up), n_deviations,
                        failures, tol)

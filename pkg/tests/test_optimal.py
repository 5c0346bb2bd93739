import math

import numpy as np
import pytest

from mfjump.backward import CostSpec, feynman_kac_backward
from mfjump.flows import FeedbackControl, TimeGrid, picard_fixed_point
from mfjump.model import (ControlGrid, Dist, band_background, constant_model,
                          schlogl_first)
from mfjump.optimal import (OscillationError, hamiltonian, hamiltonian_min,
                            solve_optimal, verify_optimality)
from mfjump.sampling import payoff_mc_direct


def _cost(f_scalar, f_rows=None, h=None, f_bound=2.0, h_bound=1.0):
    return CostSpec(f=f_scalar, h=h or (lambda i, mu: 0.0),
                    f_bound=f_bound, h_bound=h_bound, f_rows=f_rows)


def test_hamiltonian_zero_z_is_running_cost(schlogl_small):
    mu = Dist.point(5, 20)
    cost = _cost(lambda t, i, mu, u, v=None: 0.7 + 0.1 * i)
    z = np.zeros(21)
    h = hamiltonian(schlogl_small, mu, 0.3, 4, np.array([0.0]), z, cost)
    assert abs(h - (0.7 + 0.4)) < 1e-12


def test_hamiltonian_reference_rates(two_state):
    # lambda == g makes the rate term vanish for any z
    model, a, b = two_state
    mu = Dist.point(0, 1)
    cost = _cost(lambda t, i, mu, u, v=None: 0.25)
    z = np.array([0.0, 2.3])
    h = hamiltonian(model, mu, 0.0, 0, np.array([0.0]), z, cost)
    assert abs(h - 0.25) < 1e-12


def test_hamiltonian_single_pair_arithmetic():
    # single active pair, z = ln 2, lambda - g = 3, f = 1 -> H = 1 + 1*3
    from mfjump.model import IntensityModel, QMatrix
    q = QMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    model = IntensityModel(
        g=q, rate=lambda t, i, j, mu, u, v=None: 4.0 if (i, j) == (0, 1) else 1.0,
        rate_rows=lambda t, mu, ur, vr=None: np.array([[0.0, 4.0], [1.0, 0.0]]))
    cost = _cost(lambda t, i, mu, u, v=None: 1.0)
    z = np.array([0.0, math.log(2.0)])
    h = hamiltonian(model, Dist.point(0, 1), 0.0, 0, np.array([0.0]), z, cost)
    assert abs(h - 4.0) < 1e-12


def test_hamiltonian_min_separable(schlogl_small):
    grid = ControlGrid.scalar([-1.0, 0.0, 1.0])
    cost = _cost(lambda t, i, mu, u, v=None: float(u[0]) ** 2)
    mu = Dist.point(5, 20)
    z = np.random.default_rng(0).normal(size=21) * 0.1
    h_star, point, idx = hamiltonian_min(schlogl_small, mu, 0.1, 4, z, grid, cost)
    assert idx == 1 and point[0] == 0.0
    # singleton grid returns its only point
    single = ControlGrid.scalar([0.7])
    _, pt, idx0 = hamiltonian_min(schlogl_small, mu, 0.1, 4, z, single, cost)
    assert idx0 == 0 and pt[0] == 0.7


def test_hamiltonian_min_refinement_monotone(schlogl_small):
    coarse = ControlGrid.scalar([-1.0, 0.0, 1.0])
    fine = ControlGrid.scalar([-1.0, -0.5, 0.0, 0.5, 1.0])
    cost = _cost(lambda t, i, mu, u, v=None: (float(u[0]) - 0.3) ** 2)
    mu = Dist.point(5, 20)
    z = np.zeros(21)
    h_coarse, _, _ = hamiltonian_min(schlogl_small, mu, 0.0, 4, z, coarse, cost)
    h_fine, _, _ = hamiltonian_min(schlogl_small, mu, 0.0, 4, z, fine, cost)
    assert h_fine <= h_coarse + 1e-15


@pytest.fixture(scope="module")
def control_free_setup(two_state):
    model, a, b = two_state
    grid = TimeGrid(1.0, 100)
    xi = Dist.point(0, 1)
    return model, grid, xi


def test_solve_optimal_control_free_lambda(control_free_setup):
    # lambda ignores u; f(u) = u^2 picks 0 pointwise; one outer iteration
    model, grid, xi = control_free_setup
    gu = ControlGrid.scalar([-1.0, 0.0, 1.0])
    cost = _cost(lambda t, i, mu, u, v=None: float(u[0]) ** 2,
                 f_rows=lambda t, mu, ur, vr=None: ur[:, 0] ** 2)
    result = solve_optimal(model, gu, cost, xi, 0, grid, tol=1e-6)
    assert result.n_outer == 1
    assert (result.u_star.indices == 1).all()
    assert result.hamiltonian_gap == 0.0
    assert result.terminal_gap == 0.0
    assert np.abs(result.sol_star.Y).max() < 1e-12


@pytest.fixture(scope="module")
def control_preset():
    """Controlled Schlogl: u in {0.5, 1.0} replaces the birth constant.

    The law coupling is kept weak: node-wise domination of the candidate over
    arbitrary feedback controls (each with its own consistent flow) holds only
    up to a flow-sensitivity term proportional to the coupling strength.
    """
    nu = band_background(20, [1.0])
    model = schlogl_first(0.8, 2e-4, 2e-4, 0.0, nu, u_role="beta0")
    gu = ControlGrid.scalar([0.5, 1.0])
    states = np.arange(21, dtype=float)
    cost = CostSpec(
        f=lambda t, i, mu, u, v=None: 0.05 * i + 0.02 * float(u[0]),
        h=lambda i, mu: 0.2 if i >= 10 else 0.0,
        f_bound=1.5, h_bound=0.2,
        f_rows=lambda t, mu, ur, vr=None: 0.05 * states + 0.02 * ur[:, 0])
    grid = TimeGrid(1.0, 200)
    xi = Dist.point(5, 20)
    return model, gu, cost, grid, xi


@pytest.fixture(scope="module")
def control_result(control_preset):
    model, gu, cost, grid, xi = control_preset
    return solve_optimal(model, gu, cost, xi, 5, grid, tol=1e-6,
                         picard_tol=1e-9)


def test_solve_optimal_converges(control_preset, control_result):
    model, gu, cost, grid, xi = control_preset
    r = control_result
    assert r.consistency_gap < 1e-6
    assert r.hamiltonian_gap == 0.0
    assert r.terminal_gap == 0.0
    # the candidate mostly picks the cheaper birth rate under a state penalty
    assert (r.u_star.indices == 0).mean() > 0.5


def test_rerunning_picard_is_consistent(control_preset, control_result):
    model, gu, cost, grid, xi = control_preset
    r = control_result
    flow2, _ = picard_fixed_point(model, r.u_star, xi, grid, tol=1e-9)
    assert r.flow_star.sup_distance(flow2) < 2e-6


def test_verify_optimality(control_preset, control_result):
    model, gu, cost, grid, xi = control_preset
    rep = verify_optimality(model, control_result, gu, cost, xi,
                            n_random_controls=25, seed=13)
    assert rep.recompute_gap < 1e-8
    assert rep.min_slack_nodewise >= -1e-6
    assert rep.min_slack_at_start >= -1e-6
    assert rep.ok, rep.failures


def test_optimal_value_matches_mc(control_preset, control_result):
    model, gu, cost, grid, xi = control_preset
    r = control_result
    est = payoff_mc_direct(model, r.flow_star, r.u_star, cost, 5, 50000,
                           seed=55)
    log_se = est.std_error / est.mean
    assert abs(math.log(est.mean) - r.value_at_start) <= 3.0 * log_se


def test_grid_refinement_never_increases_value(control_free_setup):
    # control enters the running cost only, so the flow is shared and the
    # refined grid minimizes over a superset pointwise
    model, grid, xi = control_free_setup
    cost = _cost(lambda t, i, mu, u, v=None: (float(u[0]) - 0.3) ** 2 + 0.1 * i,
                 f_rows=lambda t, mu, ur, vr=None: (ur[:, 0] - 0.3) ** 2
                 + 0.1 * np.arange(2.0))
    coarse = ControlGrid.scalar([-1.0, 0.0, 1.0])
    fine = ControlGrid.scalar([-1.0, -0.5, 0.0, 0.25, 0.5, 1.0])
    r_coarse = solve_optimal(model, coarse, cost, xi, 0, grid, tol=1e-6)
    r_fine = solve_optimal(model, fine, cost, xi, 0, grid, tol=1e-6)
    assert r_fine.value_at_start <= r_coarse.value_at_start + 1e-9


def test_sweep_includes_candidate_control(control_preset, control_result):
    # re-solving under u* reproduces Y* exactly (same tables, same stepper)
    model, gu, cost, grid, xi = control_preset
    r = control_result
    sol = feynman_kac_backward(model, r.flow_star, r.u_star, cost)
    assert r.sol_star.sup_diff(sol) == 0.0


def test_oscillation_detected():
    # strong mean-field push-pull: the best response flips the birth scaling
    # each round, so the outer loop lands in a reported 2-cycle
    nu = band_background(12, [1.0])
    model = schlogl_first(1.0, 0.05, 0.05, 0.0, nu, u_role="up_scale")
    gu = ControlGrid.scalar([0.25, 4.0])
    states = np.arange(13, dtype=float)

    def f_rows(t, mu, ur, vr=None):
        from mfjump.model import moments
        return 5.0 * ur[:, 0] * (moments(mu, 1) - 4.0)

    cost = CostSpec(f=lambda t, i, mu, u, v=None: float(f_rows(t, mu,
                    np.broadcast_to(np.atleast_1d(u), (13, 1)))[i]),
                    h=lambda i, mu: 0.0, f_bound=50.0, h_bound=1.0,
                    f_rows=f_rows)
    grid = TimeGrid(1.0, 80)
    xi = Dist.point(4, 12)
    with pytest.raises(OscillationError):
        solve_optimal(model, gu, cost, xi, 4, grid, tol=1e-8, max_outer=40)

import math

import numpy as np
import pytest

from mfjump.backward import (BalancedDecompositionError, BsdeSolution,
                             CostSpec, balanced_decomposition,
                             balanced_weights, comparison_check,
                             entropic_backward, feynman_kac_backward, tau)
from mfjump.flows import Flow, TimeGrid, picard_fixed_point
from mfjump.model import Dist, ModelError
from mfjump.oracles import expm_backward_value


@pytest.fixture(scope="module")
def schlogl_flow(schlogl_small, grid_small, xi_small):
    flow, _ = picard_fixed_point(schlogl_small, None, xi_small, grid_small,
                                 tol=1e-9)
    return flow


def _zero_cost(n):
    return CostSpec(f=lambda t, i, mu, u, v=None: 0.0, h=lambda i, mu: 0.0,
                    f_bound=1.0, h_bound=1.0,
                    f_rows=lambda t, mu, ur, vr=None: np.zeros(n))


def test_tau_properties():
    assert tau(0.0) == 0.0
    for z in (-3.0, -0.5, 0.2, 2.0):
        assert tau(z) >= 0.0


def test_zero_cost_gives_zero_value(schlogl_small, schlogl_flow):
    sol = feynman_kac_backward(schlogl_small, schlogl_flow, None, _zero_cost(21))
    assert np.abs(sol.Y).max() < 1e-12
    ent = entropic_backward(schlogl_small, schlogl_flow, None, _zero_cost(21))
    assert np.abs(ent.Y).max() < 1e-12


def test_constant_running_cost(schlogl_small, schlogl_flow):
    c = 0.3
    cost = CostSpec(f=lambda t, i, mu, u, v=None: c, h=lambda i, mu: 0.0,
                    f_bound=1.0, h_bound=1.0,
                    f_rows=lambda t, mu, ur, vr=None: np.full(21, c))
    sol = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost)
    nodes = schlogl_flow.grid.nodes()
    expected = np.exp(c * (schlogl_flow.grid.horizon - nodes))
    assert np.abs(sol.v - expected[:, None]).max() < 1e-10


def test_two_state_expm_oracle(two_state):
    model, a, b = two_state
    grid = TimeGrid(1.0, 400)
    xi = Dist.point(0, 1)
    flow = Flow.constant(grid, xi)
    cost = CostSpec(f=lambda t, i, mu, u, v=None: float(i == 1),
                    h=lambda i, mu: 0.0, f_bound=1.0, h_bound=1.0)
    sol = feynman_kac_backward(model, flow, None, cost)
    oracle = expm_backward_value(model.g.generator(), [0.0, 1.0], [0.0, 0.0],
                                 1.0, grid.n_nodes)
    assert np.abs(sol.v - oracle).max() <= 1e-8


def test_backward_convergence_order(two_state):
    model, a, b = two_state
    xi = Dist.point(0, 1)
    cost = CostSpec(f=lambda t, i, mu, u, v=None: float(i == 1),
                    h=lambda i, mu: 0.1 * i, f_bound=1.0, h_bound=0.2)
    errs = {}
    for n in (50, 100):
        grid = TimeGrid(1.0, n)
        sol = feynman_kac_backward(model, Flow.constant(grid, xi), None, cost)
        oracle = expm_backward_value(model.g.generator(), [0.0, 1.0],
                                     [0.0, 0.1], 1.0, grid.n_nodes)
        errs[n] = np.abs(sol.v - oracle).max()
    assert math.log2(errs[50] / errs[100]) >= 3.5


def test_transform_equivalence(schlogl_small, schlogl_flow, cost_small):
    lin = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    ent = entropic_backward(schlogl_small, schlogl_flow, None, cost_small)
    assert lin.sup_diff(ent) <= 1e-8


def test_apriori_bound(schlogl_small, schlogl_flow, cost_small):
    sol = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    bound = cost_small.h_bound + schlogl_flow.grid.horizon * cost_small.f_bound
    assert np.abs(sol.Y).max() <= bound + 1e-9
    assert (sol.v > 0).all()


def test_solution_redundancy_and_io(schlogl_small, schlogl_flow, cost_small,
                                    tmp_path):
    sol = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    assert sol.check_redundancy() == 0.0
    z = sol.Z
    assert z.shape == (schlogl_flow.grid.n_nodes, 21, 21)
    assert np.abs(z[5, 3, 7] - (sol.Y[5, 7] - sol.Y[5, 3])) < 1e-15
    path = tmp_path / "sol.json"
    sol.write_json(path)
    import json
    with open(path) as fh:
        back = BsdeSolution.from_json_obj(json.load(fh))
    assert np.array_equal(back.Y, sol.Y)
    csv_path = tmp_path / "sol.csv"
    sol.write_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 1 + schlogl_flow.grid.n_nodes * 21


def test_cost_spec_bounds(schlogl_small):
    cost = CostSpec(f=lambda t, i, mu, u, v=None: 2.0, h=lambda i, mu: 0.0,
                    f_bound=1.0, h_bound=1.0)
    worst_f, worst_h, ok = cost.check_bounds(
        [0.0], [Dist.point(0, 4)], [np.array([0.0])])
    assert worst_f == 2.0 and not ok


# -- balanced decomposition ---------------------------------------------------


def test_balanced_singleton_family():
    ell = np.array([[0.5, -0.2, 0.1]])
    f = np.array([1.0])
    g = np.array([1.0, 2.0, 0.5])
    z = np.array([0.3, -0.1, 0.7])
    zbar = np.array([-0.2, 0.4, 0.0])
    ell_hat, res = balanced_decomposition(ell, f, 1.0, z, zbar, g, "min")
    assert res < 1e-14
    assert np.allclose(ell_hat, ell[0])


def test_balanced_equal_arguments():
    ell = np.array([[0.5, -0.2], [0.1, 0.3]])
    ell_hat, res = balanced_decomposition(ell, np.zeros(2), 1.0,
                                          np.array([0.1, 0.2]),
                                          np.array([0.1, 0.2]),
                                          np.ones(2), "min")
    assert res == 0.0


@pytest.mark.parametrize("mode", ["min", "max"])
def test_balanced_random_families(mode):
    rng = np.random.default_rng(3)
    for _ in range(100):
        n_a, m = 5, 4
        ells = np.maximum(rng.normal(size=(n_a, m)), -0.95)
        fs = rng.normal(size=n_a)
        g_row = rng.random(m) + 0.1
        y = float(rng.random() + 0.5)
        z = rng.normal(size=m)
        zbar = rng.normal(size=m)
        ell_hat, res = balanced_decomposition(ells, fs, y, z, zbar, g_row, mode)
        assert res < 1e-10
        assert (1.0 + ell_hat > 0.0).all()


def test_balanced_inconsistent_family_raises():
    # sandwich violated: F values not generated by the supplied extremes
    with pytest.raises(BalancedDecompositionError):
        balanced_weights(10.0, 0.0, np.zeros(2), np.zeros(2),
                         np.array([1.0, 0.0]), np.zeros(2), np.ones(2))


def test_balanced_maxmin_composite():
    # game-driver check: product family with outer max over one index,
    # inner min over the other; extremes over the whole product family
    rng = np.random.default_rng(5)
    for _ in range(50):
        na, nb, m = 3, 4, 3
        ells = np.maximum(rng.normal(size=(na, nb, m)), -0.9)
        fs = rng.normal(size=(na, nb))
        g_row = rng.random(m) + 0.1
        y = 1.0
        z = rng.normal(size=m)
        zbar = rng.normal(size=m)

        def val(zz):
            inner = y * fs + (ells * (zz * g_row)).sum(axis=2)
            return float(inner.min(axis=0).max())

        flat = ells.reshape(-1, m)
        ell_hat, res = balanced_weights(val(z), val(zbar), flat.min(axis=0),
                                        flat.max(axis=0), z, zbar, g_row)
        assert res < 1e-10
        assert (1.0 + ell_hat > 0.0).all()


# -- comparison ---------------------------------------------------------------


def test_comparison_identical(schlogl_small, schlogl_flow, cost_small):
    sol = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    rep = comparison_check(sol, sol, terminal_margins=np.zeros(21))
    assert rep.ok and rep.min_margin == 0.0


def test_comparison_shifted_terminal(schlogl_small, schlogl_flow, cost_small):
    lower = CostSpec(f=cost_small.f, f_rows=cost_small.f_rows,
                     h=lambda i, mu: cost_small.h(i, mu) - 1.0,
                     f_bound=cost_small.f_bound, h_bound=cost_small.h_bound + 1)
    hi = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    lo = feynman_kac_backward(schlogl_small, schlogl_flow, None, lower)
    rep = comparison_check(hi, lo, terminal_margins=np.ones(21))
    assert rep.ok
    assert rep.min_margin > 0.0


def test_comparison_rejects_bad_certificate(schlogl_small, schlogl_flow,
                                            cost_small):
    sol = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    with pytest.raises(ModelError):
        comparison_check(sol, sol, terminal_margins=np.array([-1.0]))


def test_comparison_reports_violation(schlogl_small, schlogl_flow, cost_small):
    hi = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    lower = CostSpec(f=cost_small.f, f_rows=cost_small.f_rows,
                     h=lambda i, mu: cost_small.h(i, mu) + 1.0,
                     f_bound=cost_small.f_bound, h_bound=cost_small.h_bound + 1)
    lo = feynman_kac_backward(schlogl_small, schlogl_flow, None, lower)
    rep = comparison_check(hi, lo)
    assert not rep.ok
    assert rep.min_margin < 0

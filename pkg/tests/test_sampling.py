import math

import numpy as np
import pytest

import mfjump._kernel_pure as kp
from mfjump.backward import CostSpec, feynman_kac_backward
from mfjump.fields import rate_tables, cost_tables
from mfjump.flows import Flow, TimeGrid, picard_fixed_point
from mfjump.model import Dist, IntensityModel, ModelError, QMatrix, constant_model
from mfjump.oracles import fit_decay_exponent, two_state_marginal
from mfjump.sampling import (MajorantError, PathRecord, dump_paths_csv,
                             girsanov_logweight, girsanov_martingale_check,
                             martingale_diagnostic, particle_system,
                             payoff_mc_direct, payoff_mc_girsanov, sample_path)

try:
    import mfjump._kernel_c as kc
except ImportError:  # pragma: no cover - compiled lane should exist in CI
    kc = None

LANES = [kp] + ([kc] if kc is not None else [])


@pytest.fixture(scope="module")
def schlogl_flow(schlogl_small, grid_small, xi_small):
    flow, _ = picard_fixed_point(schlogl_small, None, xi_small, grid_small,
                                 tol=1e-9)
    return flow


def test_path_record_validates():
    with pytest.raises(ModelError):
        PathRecord(x0=0, events=((0.5, 1, 2),), horizon=1.0)  # broken chain
    with pytest.raises(ModelError):
        PathRecord(x0=0, events=((1.5, 0, 1),), horizon=1.0)  # beyond horizon
    rec = PathRecord(x0=0, events=((0.2, 0, 1), (0.7, 1, 0)), horizon=1.0)
    assert rec.x_end == 0
    assert rec.counting(2)[0, 1] == 1


def test_zero_rates_no_events():
    q = QMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    zero = IntensityModel(g=q, rate=lambda *a, **k: 0.0,
                          rate_rows=lambda t, mu, ur, vr=None: np.zeros((2, 2)))
    grid = TimeGrid(1.0, 10)
    flow = Flow.constant(grid, Dist.point(0, 1))
    rec = sample_path(zero, flow, None, 0, seed=1)
    assert rec.events == ()


def test_sample_path_deterministic(schlogl_small, schlogl_flow):
    a = sample_path(schlogl_small, schlogl_flow, None, 5, seed=42)
    b = sample_path(schlogl_small, schlogl_flow, None, 5, seed=42)
    assert a.events == b.events
    c = sample_path(schlogl_small, schlogl_flow, None, 5, seed=43)
    assert a.events != c.events


@pytest.mark.parametrize("lane", LANES, ids=lambda m: m.IMPL)
def test_lane_smoke(lane, schlogl_small, schlogl_flow):
    tab = rate_tables(schlogl_small, schlogl_flow, None)
    times, srcs, dsts, x_end = lane.sample_path_events(
        tab.left, tab.right, tab.rs_left, tab.rs_right, tab.majorant,
        tab.dt, tab.horizon, 5, 42, 0, 0)
    assert (np.diff(times) > 0).all() if times.size > 1 else True
    assert x_end == (dsts[-1] if len(dsts) else 5)


@pytest.mark.skipif(kc is None, reason="compiled kernel not built")
def test_kernel_twins_bit_identical(schlogl_small, schlogl_flow, cost_small):
    """The compiled and pure lanes must produce bit-identical output."""
    tab = rate_tables(schlogl_small, schlogl_flow, None, pair_cumulative=True)
    ct = cost_tables(cost_small, schlogl_flow, None)
    for idx in range(20):
        a = kp.sample_path_events(tab.left, tab.right, tab.rs_left,
                                  tab.rs_right, tab.majorant, tab.dt,
                                  tab.horizon, 5, 9, 0, idx)
        b = kc.sample_path_events(tab.left, tab.right, tab.rs_left,
                                  tab.rs_right, tab.majorant, tab.dt,
                                  tab.horizon, 5, 9, 0, idx)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
    args = (tab.left, tab.right, tab.rs_left, tab.rs_right, tab.majorant,
            tab.dt, tab.horizon, ct.left, ct.right, ct.cum, 5, 17, 0, 0, 500)
    pa = kp.batch_payoff_direct(*args)
    pb = kc.batch_payoff_direct(*args)
    assert np.array_equal(pa[0], pb[0]) and np.array_equal(pa[1], pb[1])
    g = schlogl_small.g
    n, size = tab.n_steps, tab.n_states
    ref_left = np.ascontiguousarray(np.broadcast_to(g.rates, (n, size, size)))
    ref_rs = np.ascontiguousarray(np.broadcast_to(g.row_sums, (n, size)))
    gargs = (ref_left, ref_left, ref_rs, ref_rs, 1.05 * g.row_sums.copy(),
             g.rates, g.row_sums, tab.left, tab.right, tab.rs_left,
             tab.rs_right, tab.cum_rs, ct.left, ct.right, ct.cum,
             tab.dt, tab.horizon, 5, 23, 1, 0, 500)
    ga = kp.batch_girsanov(*gargs)
    gb = kc.batch_girsanov(*gargs)
    for x, y in zip(ga, gb):
        assert np.array_equal(x, y)
    pairs = g.active_pairs()
    pair_col = np.full((size, size), -1, dtype=np.int64)
    for c, (i, j) in enumerate(pairs):
        pair_col[i, j] = c
    margs = (tab.left, tab.right, tab.rs_left, tab.rs_right, tab.majorant,
             tab.cum_pair, pair_col, tab.dt, tab.horizon, 5, 31, 2, 0, 300,
             len(pairs))
    ma = kp.batch_martingale(*margs)
    mb = kc.batch_martingale(*margs)
    assert np.array_equal(ma, mb)


def test_two_state_transition_matches_closed_form(two_state):
    model, a, b = two_state
    grid = TimeGrid(1.0, 50)
    xi = Dist.point(0, 1)
    flow = Flow.constant(grid, xi)
    cost = CostSpec(f=lambda t, i, mu, u, v=None: 0.0, h=lambda i, mu: float(i),
                    f_bound=1.0, h_bound=1.0,
                    f_rows=lambda t, mu, ur, vr=None: np.zeros(2))
    n = 100000
    est = payoff_mc_direct(model, flow, None, cost, 0, n, seed=5)
    # exp(h(x_T)) has mean p*e + (1-p); invert for the empirical p
    p_hat = (est.mean - 1.0) / (math.e - 1.0)
    p_exact = two_state_marginal(a, b, 1.0)
    se_p = est.std_error / (math.e - 1.0)
    assert abs(p_hat - p_exact) <= 3.0 * se_p


def test_girsanov_zero_when_rates_match_reference(two_state):
    model, a, b = two_state
    grid = TimeGrid(1.0, 20)
    flow = Flow.constant(grid, Dist.point(0, 1))
    for k in range(5):
        rec = sample_path(model, flow, None, 0, seed=3, path_index=k)
        assert abs(rec.log_girsanov) < 1e-12


def test_girsanov_no_jump_value(schlogl_small, grid_small, xi_small,
                                schlogl_flow):
    rec = PathRecord(x0=5, events=(), horizon=1.0)
    lw = girsanov_logweight(schlogl_small, schlogl_flow, None, rec)
    tab = rate_tables(schlogl_small, schlogl_flow, None)
    expected = -(tab.integral_row_sum(5, 0.0, 1.0)
                 - schlogl_small.g.row_sums[5] * 1.0)
    assert abs(lw - expected) < 1e-12


def test_girsanov_rejects_inactive_pair(schlogl_small, schlogl_flow):
    rec = PathRecord(x0=5, events=((0.5, 5, 9),), horizon=1.0)
    with pytest.raises(ModelError):
        girsanov_logweight(schlogl_small, schlogl_flow, None, rec)


def test_logweight_matches_kernel(schlogl_small, schlogl_flow):
    # the kernel-accumulated weight and the python recomputation agree
    tab = rate_tables(schlogl_small, schlogl_flow, None)
    g = schlogl_small.g
    n, size = tab.n_steps, tab.n_states
    ref_left = np.ascontiguousarray(np.broadcast_to(g.rates, (n, size, size)))
    ref_rs = np.ascontiguousarray(np.broadcast_to(g.row_sums, (n, size)))
    logw, _, x_end = kp.batch_girsanov(
        ref_left, ref_left, ref_rs, ref_rs, 1.05 * g.row_sums.copy(),
        g.rates, g.row_sums, tab.left, tab.right, tab.rs_left, tab.rs_right,
        tab.cum_rs, np.zeros((n, size)), np.zeros((n, size)),
        np.zeros((n + 1, size)), tab.dt, tab.horizon, 5, 77, 1, 0, 10)
    ref_tab_model = constant_model(g.rates.copy())
    for idx in range(10):
        times, srcs, dsts, _ = kp.sample_path_events(
            ref_left, ref_left, ref_rs, ref_rs, 1.05 * g.row_sums.copy(),
            tab.dt, tab.horizon, 5, 77, 1, idx)
        rec = PathRecord(x0=5, events=tuple(
            (float(t), int(i), int(j)) for t, i, j in zip(times, srcs, dsts)),
            horizon=tab.horizon)
        lw = girsanov_logweight(schlogl_small, schlogl_flow, None, rec)
        assert abs(lw - logw[idx]) < 1e-10


def test_density_mean_is_one(schlogl_small, schlogl_flow):
    est = girsanov_martingale_check(schlogl_small, schlogl_flow, None, 5,
                                    30000, seed=240)
    assert abs(est.mean - 1.0) <= 3.0 * est.std_error


def test_estimator_agreement(schlogl_small, schlogl_flow, cost_small):
    sol = feynman_kac_backward(schlogl_small, schlogl_flow, None, cost_small)
    ode = float(sol.v[0, 5])
    direct = payoff_mc_direct(schlogl_small, schlogl_flow, None, cost_small,
                              5, 30000, seed=88)
    girs = payoff_mc_girsanov(schlogl_small, schlogl_flow, None, cost_small,
                              5, 30000, seed=88)
    assert abs(direct.mean - girs.mean) <= 3.0 * math.hypot(
        direct.std_error, girs.std_error)
    assert abs(direct.mean - ode) <= 3.0 * direct.std_error
    assert abs(girs.mean - ode) <= 3.0 * girs.std_error


def test_constant_payoff_exact(schlogl_small, schlogl_flow):
    zero = CostSpec(f=lambda t, i, mu, u, v=None: 0.0, h=lambda i, mu: 0.0,
                    f_bound=1.0, h_bound=1.0,
                    f_rows=lambda t, mu, ur, vr=None: np.zeros(21))
    est = payoff_mc_direct(schlogl_small, schlogl_flow, None, zero, 5, 500,
                           seed=1)
    assert est.mean == 1.0 and est.std_error == 0.0
    c = 0.4
    const = CostSpec(f=lambda t, i, mu, u, v=None: c, h=lambda i, mu: 0.0,
                     f_bound=1.0, h_bound=1.0,
                     f_rows=lambda t, mu, ur, vr=None: np.full(21, c))
    est = payoff_mc_direct(schlogl_small, schlogl_flow, None, const, 5, 500,
                           seed=1)
    assert abs(est.mean - math.exp(c)) < 1e-12
    assert est.std_error < 1e-12


def test_thread_count_invariance(schlogl_small, schlogl_flow, cost_small):
    runs = [payoff_mc_direct(schlogl_small, schlogl_flow, None, cost_small,
                             5, 4000, seed=12, threads=k) for k in (1, 2, 4)]
    assert runs[0].mean == runs[1].mean == runs[2].mean
    assert runs[0].std_error == runs[1].std_error == runs[2].std_error


def test_martingale_diagnostic(two_state):
    model, a, b = two_state
    grid = TimeGrid(1.0, 50)
    flow = Flow.constant(grid, Dist.point(0, 1))
    rep = martingale_diagnostic(model, flow, None, 0, 100000, seed=77)
    assert rep.ok, rep.flagged
    assert len(rep.pairs) == 2


def test_martingale_diagnostic_schlogl(schlogl_small, schlogl_flow):
    rep = martingale_diagnostic(schlogl_small, schlogl_flow, None, 5, 20000,
                                seed=31)
    worst = float(np.max(np.abs(rep.means) / np.maximum(rep.std_errors, 1e-300)))
    assert worst <= 4.0, rep.flagged


def test_majorant_violation_raises(schlogl_small, schlogl_flow):
    tab = rate_tables(schlogl_small, schlogl_flow, None)
    bad_majorant = tab.majorant / 10.0
    with pytest.raises(MajorantError):
        for idx in range(50):
            kp.sample_path_events(tab.left, tab.right, tab.rs_left,
                                  tab.rs_right, bad_majorant, tab.dt,
                                  tab.horizon, 5, 3, 0, idx)


def test_particle_system_decoupled_matches_kolmogorov(two_state):
    model, a, b = two_state
    grid = TimeGrid(1.0, 50)
    xi = Dist.point(0, 1)
    flow, _ = picard_fixed_point(model, None, xi, grid, tol=1e-9)
    emp, rep = particle_system(model, None, xi, 20000, seed=5, grid=grid,
                               reference_flow=flow)
    p_exact = two_state_marginal(a, b, 1.0)
    se = math.sqrt(p_exact * (1 - p_exact) / 20000)
    assert abs(emp.dists[-1].probs[1] - p_exact) <= 4.0 * se
    assert rep.w1_terminal is not None


def test_particle_system_no_motion():
    q = QMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    zero = IntensityModel(g=q, rate=lambda *a, **k: 0.0,
                          rate_rows=lambda t, mu, ur, vr=None: np.zeros((2, 2)))
    grid = TimeGrid(1.0, 5)
    xi = Dist([0.5, 0.5])
    emp, rep = particle_system(zero, None, xi, 2, seed=9, grid=grid)
    assert rep.n_events == 0
    assert all(np.array_equal(d.probs, emp.dists[0].probs) for d in emp.dists)


def test_particle_chaos_scaling(schlogl_small, grid_small, xi_small,
                                schlogl_flow):
    sizes = (100, 1000, 10000)
    means = []
    for n in sizes:
        vals = [particle_system(schlogl_small, None, xi_small, n,
                                seed=100 + 7 * r + n, grid=grid_small,
                                reference_flow=schlogl_flow)[1].w1_terminal
                for r in range(4)]
        means.append(float(np.mean(vals)))
    assert fit_decay_exponent(sizes, means) <= -0.35


def test_dump_paths_csv(schlogl_small, schlogl_flow, tmp_path):
    recs = [sample_path(schlogl_small, schlogl_flow, None, 5, seed=2,
                        path_index=k) for k in range(3)]
    out = tmp_path / "paths.csv"
    dump_paths_csv(out, recs)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "path_id,time,from,to"
    assert len(lines) == 1 + sum(len(r.events) for r in recs)

"""Independent reference computations used by the verification battery.

These deliberately avoid the production code paths: optimal transport is
solved as an explicit linear program, backward values come from a matrix
exponential, and the two-state marginal has a closed form.  They exist to
check the fast implementations, never to replace them.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linprog

__all__ = [
    "lp_wasserstein",
    "expm_backward_value",
    "two_state_marginal",
    "fit_decay_exponent",
]


def lp_wasserstein(mu_probs, nu_probs, power: int = 1) -> float:
    """W_p between two discrete laws on {0..N} by solving the transport LP."""
    p = np.asarray(mu_probs, dtype=float)
    q = np.asarray(nu_probs, dtype=float)
    n, m = p.size, q.size
    xs = np.arange(n, dtype=float)
    ys = np.arange(m, dtype=float)
    cost = np.abs(xs[:, None] - ys[None, :]) ** power
    a_eq = []
    for i in range(n):
        row = np.zeros((n, m))
        row[i, :] = 1.0
        a_eq.append(row.ravel())
    for j in range(m):
        row = np.zeros((n, m))
        row[:, j] = 1.0
        a_eq.append(row.ravel())
    a_eq = np.array(a_eq)[:-1]  # drop one redundant constraint
    b_eq = np.concatenate([p, q])[:-1]
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError("transport LP failed: %s" % res.message)
    return float(res.fun) ** (1.0 / power)


def expm_backward_value(generator, f_vec, h_vec, horizon: float,
                        n_nodes: int = 2) -> np.ndarray:
    """v(t_k) = expm((T - t_k)(G + diag f)) exp(h) on a uniform node set.

    Oracle for the linear backward equation with constant rates and costs.
    Returns an (n_nodes, S) table over equally spaced nodes including 0 and T.
    """
    gen = np.asarray(generator, dtype=float)
    m = gen + np.diag(np.asarray(f_vec, dtype=float))
    v_term = np.exp(np.asarray(h_vec, dtype=float))
    ts = np.linspace(0.0, horizon, n_nodes)
    return np.stack([expm((horizon - t) * m) @ v_term for t in ts])


def two_state_marginal(a: float, b: float, t: float) -> float:
    """P(x_t = 1) for the two-state chain with rates a: 0->1, b: 1->0, x_0 = 0."""
    return a / (a + b) * (1.0 - math.exp(-(a + b) * t))


def fit_decay_exponent(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])

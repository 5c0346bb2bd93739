"""State space, distributions, exact 1-D transport metrics and jump-intensity models.

The state space is the truncated integer lattice {0, ..., n_max}. Probability
distributions are dense vectors on it; the 1- and 2-Wasserstein distances are
computed exactly from CDFs / quantile couplings (no LP at runtime -- the LP
formulation survives only as a test oracle).

An :class:`IntensityModel` bundles a controlled jump-rate function with the
reference Q-matrix it is absolutely continuous with respect to.  The Schlogl
and autocatalytic birth/death presets couple the rates to moments of the
current marginal law.  All objects are immutable after construction and safe
to share across threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "StateSpace",
    "Dist",
    "QMatrix",
    "ControlGrid",
    "IntensityModel",
    "AssumptionReport",
    "moments",
    "wasserstein1",
    "wasserstein2",
    "band_background",
    "schlogl_first",
    "schlogl_second",
    "autocatalytic",
    "constant_model",
    "validate_assumptions",
]


class ModelError(ValueError):
    """Invalid model construction or mismatched inputs."""


@dataclass(frozen=True)
class StateSpace:
    """Truncated integer state space {0, ..., n_max}."""

    n_max: int

    def __post_init__(self):
        if int(self.n_max) < 1:
            raise ModelError("n_max must be >= 1")
        object.__setattr__(self, "n_max", int(self.n_max))

    @property
    def size(self) -> int:
        return self.n_max + 1

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.size)


class Dist:
    """Probability distribution on {0, ..., n_max}, renormalized on construction."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.asarray(probs, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise ModelError("probs must be a 1-D vector over at least two states")
        if np.any(p < -1e-12):
            raise ModelError("negative probability entry: %r" % float(p.min()))
        p = np.maximum(p, 0.0)
        total = p.sum()
        if not total > 0.0:
            raise ModelError("probabilities sum to zero")
        # No division when already normalized within tolerance: construction
        # is then idempotent and serialization round trips are bit-exact.
        if abs(total - 1.0) > 1e-12:
            p = p / total
        p.flags.writeable = False
        self.probs = p

    @classmethod
    def point(cls, i: int, n_max: int) -> "Dist":
        p = np.zeros(n_max + 1)
        p[i] = 1.0
        return cls(p)

    @classmethod
    def uniform(cls, n_max: int) -> "Dist":
        return cls(np.full(n_max + 1, 1.0))

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0  # kill accumulated rounding so quantile lookups terminate
        return c

    def __len__(self) -> int:
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, Dist) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return "Dist(n_max=%d, mean=%.6g)" % (self.n_max, moments(self, 1))


def moments(mu: Dist, k: int, kind: str = "raw") -> float:
    """Exact k-th raw or factorial moment of ``mu``, k in {1, 2, 3}.

    raw: sum_i p_i i^k; factorial: sum_i p_i i(i-1)...(i-k+1).
    """
    if k not in (1, 2, 3):
        raise ModelError("moment order must be 1, 2 or 3")
    x = np.arange(mu.probs.size, dtype=float)
    if kind == "raw":
        w = x**k
    elif kind == "factorial":
        w = x.copy()
        for m in range(1, k):
            w = w * (x - m)
    else:
        raise ModelError("kind must be 'raw' or 'factorial'")
    return float(np.dot(mu.probs, w))


def _check_same_space(mu: Dist, nu: Dist) -> None:
    if len(mu) != len(nu):
        raise ModelError(
            "mismatched state spaces: %d vs %d states" % (len(mu), len(nu))
        )


def wasserstein1(mu: Dist, nu: Dist) -> float:
    """Exact 1-Wasserstein distance on the integer line: sum_k |F_mu(k) - F_nu(k)|."""
    _check_same_space(mu, nu)
    return float(np.abs(mu.cdf()[:-1] - nu.cdf()[:-1]).sum())


def wasserstein2(mu: Dist, nu: Dist) -> float:
    """Exact 2-Wasserstein distance via the quantile (inverse-CDF) coupling.

    The optimal coupling in 1-D pairs quantiles; the integral over quantile
    levels is evaluated exactly by merging the two CDF breakpoint lists.
    """
    _check_same_space(mu, nu)
    fm, fn = mu.cdf(), nu.cdf()
    qs = np.unique(np.concatenate(([0.0], fm, fn)))
    widths = np.diff(qs)
    mids = qs[:-1] + widths / 2.0
    xm = np.searchsorted(fm, mids, side="left")
    xn = np.searchsorted(fn, mids, side="left")
    return math.sqrt(float(np.dot(widths, (xm - xn).astype(float) ** 2)))


class QMatrix:
    """Reference generator on the truncated space.

    Off-diagonal rates are nonnegative; pairs with a strictly positive rate are
    `active` and every intensity model used with this Q-matrix must be positive
    exactly on the same pairs. The diagonal is defined by zero row sums.
    """

    __slots__ = ("rates", "active", "row_sums", "c1", "jump_second_moment")

    def __init__(self, rates):
        r = np.array(rates, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1] or r.shape[0] < 2:
            raise ModelError("rates must be a square matrix over >= 2 states")
        np.fill_diagonal(r, 0.0)
        if np.any(r < 0.0):
            raise ModelError("off-diagonal rates must be nonnegative")
        self.rates = r
        self.active = r > 0.0
        self.row_sums = r.sum(axis=1)
        self.c1 = float(r[self.active].min()) if self.active.any() else 0.0
        i, j = np.nonzero(self.active)
        self.jump_second_moment = float((((j - i) ** 2) * r[i, j]).sum())
        self.rates.flags.writeable = False
        self.active.flags.writeable = False
        self.row_sums.flags.writeable = False

    @property
    def n_states(self) -> int:
        return self.rates.shape[0]

    def generator(self) -> np.ndarray:
        """Dense generator matrix (rows sum to zero)."""
        gen = self.rates.copy()
        gen[np.diag_indices_from(gen)] = -self.row_sums
        return gen

    def active_pairs(self):
        i, j = np.nonzero(self.active)
        return list(zip(i.tolist(), j.tolist()))


class ControlGrid:
    """Finite grid of control points, each a fixed-length tuple of reals."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] == 0 or pts.shape[0] == 0:
            raise ModelError("control grid must be nonempty")
        if pts.ndim != 2:
            raise ModelError("control points must share a fixed length")
        if len({tuple(p) for p in pts}) != pts.shape[0]:
            raise ModelError("duplicate control points")
        pts.flags.writeable = False
        self.points = pts

    @classmethod
    def scalar(cls, values: Sequence[float]) -> "ControlGrid":
        return cls(np.asarray(values, dtype=float).reshape(-1, 1))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n_points


@dataclass(frozen=True)
class IntensityModel:
    """Controlled jump intensities plus their reference Q-matrix.

    ``rate(t, i, j, mu, u, v=None)`` returns the i->j intensity under marginal
    law ``mu`` and control point(s) at the current state. ``rate_rows`` is an
    optional vectorized evaluator returning the full off-diagonal rate matrix
    for per-state control rows; the default falls back to the scalar ``rate``
    on active pairs. Rates must be strictly positive exactly on the active
    pairs of ``g``.
    """

    g: QMatrix
    rate: Callable
    rate_rows: Optional[Callable] = None
    n_players: int = 1
    name: str = ""

    @property
    def n_states(self) -> int:
        return self.g.n_states

    def rate_matrix(self, t, mu, u_pts, v_pts=None) -> np.ndarray:
        """Off-diagonal rate matrix at (t, mu) for per-state control rows.

        ``u_pts``/``v_pts`` may be a single control point or an (S, dim) array
        of per-state points.
        """
        u_rows = _broadcast_points(u_pts, self.n_states)
        v_rows = None
        if self.n_players == 2:
            if v_pts is None:
                raise ModelError("two-player model needs v controls")
            v_rows = _broadcast_points(v_pts, self.n_states)
        if self.rate_rows is not None:
            out = self.rate_rows(t, mu, u_rows, v_rows)
        else:
            out = np.zeros((self.n_states, self.n_states))
            for i, j in zip(*np.nonzero(self.g.active)):
                if v_rows is None:
                    out[i, j] = self.rate(t, i, j, mu, u_rows[i])
                else:
                    out[i, j] = self.rate(t, i, j, mu, u_rows[i], v_rows[i])
        return out


def _broadcast_points(pts, n_states: int) -> np.ndarray:
    arr = np.asarray(pts, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (n_states, arr.size))
    if arr.shape[0] != n_states:
        raise ModelError("need one control point per state")
    return arr


def band_background(n_max: int, band_rates: Sequence[float]) -> QMatrix:
    """Background Q-matrix with nu_ij > 0 iff 0 < |j - i| < N0.

    ``band_rates[d-1]`` is the rate at distance d; N0 = len(band_rates) + 1.
    """
    band = [float(r) for r in band_rates]
    if not band or any(r <= 0.0 for r in band):
        raise ModelError("band rates must be strictly positive (nu_ij > 0 inside the band)")
    size = n_max + 1
    rates = np.zeros((size, size))
    for d, r in enumerate(band, start=1):
        idx = np.arange(size - d)
        rates[idx, idx + d] = r
        rates[idx + d, idx] = r
    return QMatrix(rates)


def _check_band_structure(nu: QMatrix) -> None:
    act = nu.active
    size = nu.n_states
    dists = sorted({abs(j - i) for i, j in zip(*np.nonzero(act))})
    if not dists:
        raise ModelError("background matrix has no active pairs")
    n0 = dists[-1] + 1
    for d in range(1, n0):
        idx = np.arange(size - d)
        if not (act[idx, idx + d].all() and act[idx + d, idx].all()):
            raise ModelError("background matrix is not a full band of width %d" % (n0 - 1))


_ROLES = ("none", "beta0", "up_scale", "down_scale")


def _role_arrays(role_u, role_v, u_rows, v_rows, beta0):
    """Per-state (beta0, up factor, down factor) arrays for control roles."""
    n = u_rows.shape[0] if u_rows is not None else v_rows.shape[0]
    b0 = np.full(n, beta0)
    up = np.ones(n)
    down = np.ones(n)
    for role, rows in ((role_u, u_rows), (role_v, v_rows)):
        if rows is None or role == "none":
            continue
        val = rows[:, 0]
        if role == "beta0":
            b0 = val
        elif role == "up_scale":
            up = up * val
        elif role == "down_scale":
            down = down * val
    return b0, up, down


def _birth_death_model(nu, up_coeffs, down_coeffs, *, u_role, v_role, n_players, name):
    """Shared builder for the moment-coupled birth/death presets.

    ``up_coeffs``/``down_coeffs`` map factorial-moment order -> coefficient;
    order 0 is the constant (beta0) term. Controls act through their declared
    role: replace beta0 or scale the whole birth/death rate on the +-1 pairs.
    Rates on wider band pairs stay at the background value.
    """
    if u_role not in _ROLES or v_role not in _ROLES:
        raise ModelError("unknown control role")
    _check_band_structure(nu)
    beta0 = up_coeffs.get(0, 0.0)
    if any(c < 0 for c in up_coeffs.values()) or any(c < 0 for c in down_coeffs.values()):
        raise ModelError("preset parameters must be nonnegative")
    size = nu.n_states
    nu_rates = nu.rates

    def mf_terms(mu):
        up = 0.0
        down = 0.0
        for k, c in up_coeffs.items():
            if k > 0 and c != 0.0:
                up += c * moments(mu, k, "factorial")
        for k, c in down_coeffs.items():
            if c != 0.0:
                down += c * (moments(mu, k, "factorial") if k > 0 else 1.0)
        return up, down

    def rate(t, i, j, mu, u=None, v=None):
        u_rows = _broadcast_points(u, size) if u is not None else None
        v_rows = _broadcast_points(v, size) if v is not None else None
        b0, upf, downf = _role_arrays(u_role, v_role, u_rows, v_rows, beta0)
        up_mf, down_mf = mf_terms(mu)
        lam = nu_rates[i, j]
        if j == i + 1:
            lam = upf[i] * (lam + b0[i] + up_mf)
        elif j == i - 1:
            lam = downf[i] * (lam + down_mf)
        return float(lam)

    def rate_rows(t, mu, u_rows, v_rows=None):
        b0, upf, downf = _role_arrays(u_role, v_role, u_rows, v_rows, beta0)
        up_mf, down_mf = mf_terms(mu)
        out = nu_rates.copy()
        ii = np.arange(size - 1)
        out[ii, ii + 1] = upf[:-1] * (nu_rates[ii, ii + 1] + b0[:-1] + up_mf)
        out[ii + 1, ii] = downf[1:] * (nu_rates[ii + 1, ii] + down_mf)
        return out

    return IntensityModel(g=nu, rate=rate, rate_rows=rate_rows,
                          n_players=n_players, name=name)


def schlogl_first(beta0, beta1, delta1, delta2, nu: QMatrix, *,
                  u_role: str = "none", v_role: str = "none",
                  n_players: int = 1) -> IntensityModel:
    """First Schlogl birth/death preset.

    Birth adds beta0 + beta1 * m1(mu) on the (i, i+1) pairs, death adds
    delta1 * m1(mu) + delta2 * m2fact(mu) on the (i, i-1) pairs, on top of
    the background band ``nu``. Requires beta0, delta1 > 0.
    """
    if min(beta0, beta1, delta1, delta2) < 0:
        raise ModelError("parameters must be nonnegative")
    if not (beta0 > 0 and delta1 > 0):
        raise ModelError("beta0 and delta1 must be strictly positive")
    return _birth_death_model(
        nu, {0: beta0, 1: beta1}, {1: delta1, 2: delta2},
        u_role=u_role, v_role=v_role, n_players=n_players, name="schlogl1")


def schlogl_second(beta0, beta2, delta1, delta3, nu: QMatrix, *,
                   u_role: str = "none", v_role: str = "none",
                   n_players: int = 1) -> IntensityModel:
    """Second Schlogl preset: birth beta0 + beta2 * m2fact, death delta1 * m1 + delta3 * m3fact."""
    if min(beta0, beta2, delta1, delta3) < 0:
        raise ModelError("parameters must be nonnegative")
    if not (beta0 > 0 and delta1 > 0):
        raise ModelError("beta0 and delta1 must be strictly positive")
    return _birth_death_model(
        nu, {0: beta0, 2: beta2}, {1: delta1, 3: delta3},
        u_role=u_role, v_role=v_role, n_players=n_players, name="schlogl2")


def autocatalytic(beta1, delta2, nu: QMatrix, *,
                  u_role: str = "none", v_role: str = "none",
                  n_players: int = 1) -> IntensityModel:
    """Autocatalytic preset: the first Schlogl model with beta0 = delta1 = 0."""
    if min(beta1, delta2) < 0:
        raise ModelError("parameters must be nonnegative")
    return _birth_death_model(
        nu, {1: beta1}, {2: delta2},
        u_role=u_role, v_role=v_role, n_players=n_players, name="autocatalytic")


def constant_model(rates, g: Optional[QMatrix] = None, name: str = "constant") -> IntensityModel:
    """Control- and law-free model with fixed rate matrix (g defaults to the rates)."""
    lam = np.array(rates, dtype=float)
    np.fill_diagonal(lam, 0.0)
    gq = g if g is not None else QMatrix(lam)
    if lam.shape != gq.rates.shape:
        raise ModelError("rates and g shape mismatch")
    if np.any((lam > 0) != gq.active):
        raise ModelError("active pairs of the rates and of g must coincide")
    lam.flags.writeable = False

    def rate(t, i, j, mu, u=None, v=None):
        return float(lam[i, j])

    def rate_rows(t, mu, u_rows, v_rows=None):
        return lam.copy()

    return IntensityModel(g=gq, rate=rate, rate_rows=rate_rows, name=name)


@dataclass
class AssumptionReport:
    """Measured constants for the growth/Lipschitz hypotheses; exact positivity flags."""

    positivity_violations: list = field(default_factory=list)
    growth_constants: dict = field(default_factory=dict)
    lipschitz_mu: dict = field(default_factory=dict)
    lipschitz_u: float = 0.0

    @property
    def positivity_ok(self) -> bool:
        return not self.positivity_violations


def validate_assumptions(model: IntensityModel, times, dists, u_points,
                         v_points=None) -> AssumptionReport:
    """Sample-based validation of the positivity/growth/Lipschitz hypotheses.

    Positivity on active pairs is checked exactly on the sample set. The
    growth constant is the largest observed ratio of sum |j-i|^p lambda_ij
    against 1 + i^p + int y^p dmu, the Lipschitz constants the largest
    finite-difference ratios over sampled pairs. Measured values are reported,
    never asserted.
    """
    report = AssumptionReport()
    act_i, act_j = np.nonzero(model.g.active)
    states = np.arange(model.n_states, dtype=float)
    v_list = list(v_points) if v_points is not None else [None]
    mats = {}
    for t in times:
        for mu in dists:
            for ku, u in enumerate(u_points):
                for kv, v in enumerate(v_list):
                    lam = model.rate_matrix(t, mu, u, v)
                    mats[(t, id(mu), ku, kv)] = (lam, mu)
                    bad = lam[act_i, act_j] <= 0.0
                    for i, j in zip(act_i[bad], act_j[bad]):
                        report.positivity_violations.append(
                            (float(t), int(i), int(j), float(lam[i, j])))
    for p in (1, 2):
        best = 0.0
        for (t, _, ku, kv), (lam, mu) in mats.items():
            jumps = (np.abs(act_j - act_i).astype(float) ** p) * lam[act_i, act_j]
            per_state = np.zeros(model.n_states)
            np.add.at(per_state, act_i, jumps)
            mom = float(np.dot(mu.probs, states**p))
            denom = 1.0 + states**p + mom
            best = max(best, float((per_state / denom).max()))
        report.growth_constants[p] = best
    # Lipschitz in mu: finite differences over all sampled Dist pairs.
    for p in (1, 2):
        best = 0.0
        for t in times:
            for u in u_points:
                for v in v_list:
                    for a in range(len(dists)):
                        for b in range(a + 1, len(dists)):
                            d = wasserstein2(dists[a], dists[b])
                            if d <= 0:
                                continue
                            la = model.rate_matrix(t, dists[a], u, v)
                            lb = model.rate_matrix(t, dists[b], u, v)
                            diff = (np.abs(act_j - act_i).astype(float) ** p) * np.abs(
                                la[act_i, act_j] - lb[act_i, act_j])
                            per_state = np.zeros(model.n_states)
                            np.add.at(per_state, act_i, diff)
                            best = max(best, float(per_state.max()) / d**p)
        report.lipschitz_mu[p] = best
    # Lipschitz in the control (p = 1 only; Euclidean metric on points).
    best = 0.0
    pts = [np.atleast_1d(np.asarray(u, dtype=float)) for u in u_points]
    for t in times:
        for mu in dists:
            for v in v_list:
                for a in range(len(pts)):
                    for b in range(a + 1, len(pts)):
                        du = float(np.linalg.norm(pts[a] - pts[b]))
                        if du <= 0:
                            continue
                        la = model.rate_matrix(t, mu, pts[a], v)
                        lb = model.rate_matrix(t, mu, pts[b], v)
                        diff = np.abs(act_j - act_i).astype(float) * np.abs(
                            la[act_i, act_j] - lb[act_i, act_j])
                        per_state = np.zeros(model.n_states)
                        np.add.at(per_state, act_i, diff)
                        best = max(best, float(per_state.max()) / du)
    report.lipschitz_u = best
    return report

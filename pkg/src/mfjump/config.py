"""Experiment configuration: JSON schema, validation, canonicalization, presets.

A config is a single JSON document with sections model / grid / control /
cost / solver / mc / output.  Validation reports dotted field paths;
canonicalization fills defaults and sorts keys so that parse -> canonicalize
-> serialize -> parse is a fixed point and result documents embed a
byte-stable echo of their input.

Costs are named presets with parameters clipped to their declared bounds
(keeps the boundedness hypothesis enforceable); models are the birth/death
presets plus an explicit constant-rate matrix.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backward import CostSpec
from .flows import TimeGrid
from .model import (ControlGrid, Dist, IntensityModel, ModelError,
                    autocatalytic, band_background, constant_model, moments,
                    schlogl_first, schlogl_second)

__all__ = ["ConfigError", "ExperimentConfig", "canonical_json", "config_hash"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


_DEFAULTS = {
    "grid": {"horizon": 1.0, "n_steps": 200},
    "control": {"u_points": [[0.0]], "v_points": None},
    "cost": {
        "f": {"preset": "zero", "bound": 1.0},
        "h": {"preset": "zero", "bound": 1.0},
    },
    "solver": {
        "picard_tol": 1e-9,
        "picard_max_iter": 300,
        "outer_tol": 1e-6,
        "outer_max_iter": 60,
        "damping": 0.0,
        "scheme": "rk4",
        "inject_violation": None,
    },
    "mc": {"n_paths": 10000, "n_particles": 1000},
    "output": {"formats": ["json", "csv"], "dump_paths": 0},
}

_MODEL_PRESETS = ("schlogl1", "schlogl2", "autocatalytic", "constant")
_ROLES = ("none", "beta0", "up_scale", "down_scale")


def _req(section: dict, key: str, path: str):
    if key not in section or section[key] is None:
        raise ConfigError("missing field %s.%s" % (path, key))
    return section[key]


def _positive(value, path):
    if not (isinstance(value, (int, float)) and value > 0):
        raise ConfigError("%s must be positive" % path)
    return float(value)


class ExperimentConfig:
    """Validated, canonicalized experiment description."""

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        doc = copy.deepcopy(raw)
        for section, defaults in _DEFAULTS.items():
            doc.setdefault(section, {})
            if not isinstance(doc[section], dict):
                raise ConfigError("%s must be an object" % section)
            for key, val in defaults.items():
                doc[section].setdefault(key, copy.deepcopy(val))
        if "model" not in doc or not isinstance(doc.get("model"), dict):
            raise ConfigError("missing field model")
        self._validate(doc)
        self.doc = doc

    # -- validation ---------------------------------------------------------

    def _validate(self, doc):
        model = doc["model"]
        preset = _req(model, "preset", "model")
        if preset not in _MODEL_PRESETS:
            raise ConfigError("model.preset must be one of %s" % (_MODEL_PRESETS,))
        if preset == "constant":
            _req(model, "rates", "model")
        else:
            n_max = _req(model, "n_max", "model")
            if not (isinstance(n_max, int) and n_max >= 1):
                raise ConfigError("model.n_max must be an integer >= 1")
            band = _req(model, "band_rates", "model")
            if not isinstance(band, list) or not band:
                raise ConfigError("model.band_rates must be a nonempty list")
            _req(model, "params", "model")
        model.setdefault("u_role", "none")
        model.setdefault("v_role", "none")
        for key in ("u_role", "v_role"):
            if model[key] not in _ROLES:
                raise ConfigError("model.%s must be one of %s" % (key, _ROLES))
        model.setdefault("xi", None)
        _positive(doc["grid"]["horizon"], "grid.horizon")
        if not (isinstance(doc["grid"]["n_steps"], int) and doc["grid"]["n_steps"] >= 1):
            raise ConfigError("grid.n_steps must be an integer >= 1")
        for key in ("picard_tol", "outer_tol"):
            _positive(doc["solver"][key], "solver.%s" % key)
        if not 0.0 <= doc["solver"]["damping"] < 1.0:
            raise ConfigError("solver.damping must be in [0, 1)")
        if doc["solver"]["scheme"] not in ("rk4", "euler"):
            raise ConfigError("solver.scheme must be rk4 or euler")
        mc = doc["mc"]
        if "seed" not in mc or not isinstance(mc["seed"], int):
            raise ConfigError("missing field mc.seed (no wall-clock default)")
        if "x0" not in mc or not isinstance(mc["x0"], int):
            raise ConfigError("missing field mc.x0")
        for key in ("n_paths", "n_particles"):
            if not (isinstance(mc[key], int) and mc[key] >= 1):
                raise ConfigError("mc.%s must be a positive integer" % key)
        for key, section in (("f", doc["cost"]["f"]), ("h", doc["cost"]["h"])):
            if not isinstance(section, dict) or "preset" not in section:
                raise ConfigError("cost.%s.preset missing" % key)
            reg = _F_PRESETS if key == "f" else _H_PRESETS
            if section["preset"] not in reg:
                raise ConfigError("cost.%s.preset unknown: %r (have %s)"
                                  % (key, section["preset"], sorted(reg)))
            section.setdefault("bound", 1.0)
            _positive(section["bound"], "cost.%s.bound" % key)

    # -- canonical form -----------------------------------------------------

    def canonical(self) -> dict:
        return copy.deepcopy(self.doc)

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.doc).encode()

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config is not valid JSON: %s" % exc) from exc
        return cls(raw)

    # -- materialization ----------------------------------------------------

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.doc["grid"]["horizon"], self.doc["grid"]["n_steps"])

    def build_model(self) -> IntensityModel:
        m = self.doc["model"]
        preset = m["preset"]
        if preset == "constant":
            return constant_model(np.asarray(m["rates"], dtype=float))
        nu = band_background(m["n_max"], m["band_rates"])
        p = m["params"]
        two_player = (m["v_role"] != "none"
                      or self.doc["control"]["v_points"] is not None)
        kw = dict(u_role=m["u_role"], v_role=m["v_role"],
                  n_players=2 if two_player else 1)
        try:
            if preset == "schlogl1":
                return schlogl_first(p["beta0"], p["beta1"], p["delta1"],
                                     p["delta2"], nu, **kw)
            if preset == "schlogl2":
                return schlogl_second(p["beta0"], p["beta2"], p["delta1"],
                                      p["delta3"], nu, **kw)
            return autocatalytic(p["beta1"], p["delta2"], nu, **kw)
        except KeyError as exc:
            raise ConfigError("model.params missing %s" % exc) from exc
        except ModelError as exc:
            raise ConfigError("model.params invalid: %s" % exc) from exc

    def n_states(self) -> int:
        m = self.doc["model"]
        if m["preset"] == "constant":
            return len(m["rates"])
        return m["n_max"] + 1

    def initial_dist(self) -> Dist:
        xi = self.doc["model"]["xi"]
        size = self.n_states()
        if xi is None:
            return Dist.point(self.doc["mc"]["x0"], size - 1)
        if isinstance(xi, dict) and "point" in xi:
            return Dist.point(int(xi["point"]), size - 1)
        if isinstance(xi, list):
            if len(xi) != size:
                raise ConfigError("model.xi has %d entries, need %d" % (len(xi), size))
            return Dist(xi)
        raise ConfigError("model.xi must be a list or {\"point\": i}")

    def control_grids(self):
        u = ControlGrid(self.doc["control"]["u_points"])
        vp = self.doc["control"]["v_points"]
        v = ControlGrid(vp) if vp is not None else None
        return u, v

    def cost_spec(self) -> CostSpec:
        return build_cost(self.doc["cost"])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


# -- cost presets -----------------------------------------------------------


def _clip(x, bound):
    return max(-bound, min(bound, x))


def _f_zero(p):
    def f(t, i, mu, u, v=None):
        return 0.0

    def rows(t, mu, u_rows, v_rows=None):
        return np.zeros(u_rows.shape[0])

    return f, rows


def _f_const(p):
    c = float(p.get("c", 1.0))

    def f(t, i, mu, u, v=None):
        return c

    def rows(t, mu, u_rows, v_rows=None):
        return np.full(u_rows.shape[0], c)

    return f, rows


def _f_state_mean(p):
    cs = float(p.get("c_state", 1.0))
    cm = float(p.get("c_mean", 0.0))
    bound = float(p["bound"])

    def f(t, i, mu, u, v=None):
        return _clip(cs * i + cm * moments(mu, 1), bound)

    def rows(t, mu, u_rows, v_rows=None):
        n = u_rows.shape[0]
        vals = cs * np.arange(n, dtype=float) + cm * moments(mu, 1)
        return np.clip(vals, -bound, bound)

    return f, rows


def _f_control_quad(p):
    cu = float(p.get("c_u", 1.0))
    cs = float(p.get("c_state", 0.0))
    bound = float(p["bound"])

    def f(t, i, mu, u, v=None):
        return _clip(cu * float(np.dot(u, u)) + cs * i, bound)

    def rows(t, mu, u_rows, v_rows=None):
        vals = cu * (u_rows**2).sum(axis=1) + cs * np.arange(u_rows.shape[0], dtype=float)
        return np.clip(vals, -bound, bound)

    return f, rows


def _f_game_separable(p):
    """Minimizer pays c_u u^2, maximizer collects -c_v v^2, plus a state term."""
    cu = float(p.get("c_u", 1.0))
    cv = float(p.get("c_v", 1.0))
    cs = float(p.get("c_state", 0.0))
    bound = float(p["bound"])

    def f(t, i, mu, u, v=None):
        val = cu * float(np.dot(u, u)) + cs * i
        if v is not None:
            val -= cv * float(np.dot(v, v))
        return _clip(val, bound)

    def rows(t, mu, u_rows, v_rows=None):
        vals = cu * (u_rows**2).sum(axis=1) + cs * np.arange(u_rows.shape[0], dtype=float)
        if v_rows is not None:
            vals = vals - cv * (v_rows**2).sum(axis=1)
        return np.clip(vals, -bound, bound)

    return f, rows


_F_PRESETS = {
    "zero": _f_zero,
    "const": _f_const,
    "state_mean": _f_state_mean,
    "control_quad": _f_control_quad,
    "game_separable": _f_game_separable,
}


def _h_zero(p):
    return lambda i, mu: 0.0


def _h_threshold(p):
    c = float(p.get("c", 1.0))
    k0 = int(p.get("k", 0))
    bound = float(p["bound"])
    return lambda i, mu: _clip(c if i >= k0 else 0.0, bound)


def _h_linear(p):
    c = float(p.get("c", 1.0))
    bound = float(p["bound"])
    return lambda i, mu: _clip(c * i, bound)


_H_PRESETS = {"zero": _h_zero, "threshold": _h_threshold, "linear": _h_linear}


def build_cost(section: dict) -> CostSpec:
    fsec, hsec = section["f"], section["h"]
    f, rows = _F_PRESETS[fsec["preset"]](fsec)
    h = _H_PRESETS[hsec["preset"]](hsec)
    name = "%s/%s" % (fsec["preset"], hsec["preset"])
    return CostSpec(f=f, h=h, f_bound=float(fsec["bound"]),
                    h_bound=float(hsec["bound"]), f_rows=rows, name=name)

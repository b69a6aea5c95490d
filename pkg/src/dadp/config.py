"""Run configuration: a small, versioned JSON schema.

Rather than an expression interpreter, the file format declares a closed
function family sufficient for both shipped problem classes:

* ``storage`` units — scalar stock with dynamics x' = x - u + xi[coord],
  stage cost c2*u^2 + c1*u, linear terminal cost k*x;
* ``static`` units — no stock, same cost family, zero terminal cost;
* linear coupling: each unit contributes weight * u to the scalar balance.

A config carries exactly one of a ``problem`` section (units + noise) or a
``quadratic`` section (the demand-splitting family of :mod:`dadp.quadratic`).
Unknown keys anywhere are errors naming the offending path; the ``schema``
field pins the format version.  The config hash is the SHA-256 of the
canonical (sorted-key, separator-free) JSON dump of the raw parsed file, so
identical content hashes identically regardless of formatting.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .coordination import DadpConfig
from .model import DadpError, NoiseModel, ProblemSpec, linear_coupling, make_unit
from .quadratic import QuadraticSpec, independent_noise, to_problem

__all__ = [
    "ConfigError",
    "SCHEMA_VERSION",
    "load_config",
    "validate_config",
    "config_hash",
    "build_noise",
    "build_problem",
    "build_quadratic",
    "dadp_settings",
    "joint_settings",
]

SCHEMA_VERSION = "dadp-config-1"


class ConfigError(DadpError):
    """A configuration file violates the schema; the message names the key."""


_TOP_KEYS = {"schema", "name", "problem", "quadratic", "noise", "joint", "dadp"}
_PROBLEM_KEYS = {"units", "demand_coordinate", "slack_unit"}
_UNIT_KEYS = {
    "name",
    "kind",
    "initial_state",
    "state_bounds",
    "control_bounds",
    "cost",
    "terminal",
    "inflow_coordinate",
    "coupling_weight",
}
_COST_KEYS = {"c2", "c1"}
_TERMINAL_KEYS = {"k"}
_NOISE_KEYS = {"kind", "atoms", "weights", "demand", "inflows"}
_BAND_KEYS = {"mean", "spread", "atoms", "coordinate"}
_JOINT_KEYS = {"state_grid", "control_mesh", "dim_cap", "eta"}
_DADP_KEYS = {
    "step_size",
    "sample_count",
    "stop_tol",
    "max_iters",
    "lambda_grid_size",
    "lambda_margin",
    "state_grid_size",
    "control_mesh_size",
    "seed",
}
_QUADRATIC_KEYS = {
    "costs",
    "terminal_weights",
    "initial_states",
    "root_atom",
    "control_cap",
    "state_cap",
    "slack_unit",
    "warm_start",
}


def _reject_unknown(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be an object")
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}")


def load_config(path):
    """Parse and validate a config file; returns the raw dict."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    validate_config(raw)
    return raw


def validate_config(cfg):
    _reject_unknown(cfg, _TOP_KEYS, "config")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ConfigError(
            f"config.schema must be {SCHEMA_VERSION!r}, got {cfg.get('schema')!r}"
        )
    has_problem = "problem" in cfg
    has_quadratic = "quadratic" in cfg
    if has_problem == has_quadratic:
        raise ConfigError("config needs exactly one of 'problem' or 'quadratic'")
    if "noise" not in cfg:
        raise ConfigError("config.noise is required")
    _reject_unknown(cfg["noise"], _NOISE_KEYS, "config.noise")
    if has_problem:
        prob = cfg["problem"]
        _reject_unknown(prob, _PROBLEM_KEYS, "config.problem")
        units = prob.get("units")
        if not isinstance(units, list) or not units:
            raise ConfigError("config.problem.units must be a non-empty list")
        for idx, u in enumerate(units):
            where = f"config.problem.units[{idx}]"
            _reject_unknown(u, _UNIT_KEYS, where)
            kind = u.get("kind")
            if kind not in ("storage", "static"):
                raise ConfigError(f"{where}.kind must be 'storage' or 'static', got {kind!r}")
            if "cost" in u:
                _reject_unknown(u["cost"], _COST_KEYS, f"{where}.cost")
            if "terminal" in u:
                if kind != "storage":
                    raise ConfigError(f"{where}.terminal only applies to storage units")
                _reject_unknown(u["terminal"], _TERMINAL_KEYS, f"{where}.terminal")
            if kind == "storage":
                for req in ("initial_state", "state_bounds", "inflow_coordinate"):
                    if req not in u:
                        raise ConfigError(f"{where}.{req} is required for storage units")
            if "control_bounds" not in u:
                raise ConfigError(f"{where}.control_bounds is required")
    else:
        _reject_unknown(cfg["quadratic"], _QUADRATIC_KEYS, "config.quadratic")
        for req in ("costs", "terminal_weights", "initial_states"):
            if req not in cfg["quadratic"]:
                raise ConfigError(f"config.quadratic.{req} is required")
    if "joint" in cfg:
        _reject_unknown(cfg["joint"], _JOINT_KEYS, "config.joint")
    if "dadp" in cfg:
        _reject_unknown(cfg["dadp"], _DADP_KEYS, "config.dadp")
    noise = cfg["noise"]
    kind = noise.get("kind")
    if kind == "tabular":
        if "atoms" not in noise or "weights" not in noise:
            raise ConfigError("tabular noise needs config.noise.atoms and .weights")
    elif kind == "bands":
        if "demand" not in noise:
            raise ConfigError("bands noise needs config.noise.demand")
        _reject_unknown(noise["demand"], _BAND_KEYS - {"coordinate"}, "config.noise.demand")
        for j, band in enumerate(noise.get("inflows", [])):
            _reject_unknown(band, _BAND_KEYS, f"config.noise.inflows[{j}]")
    else:
        raise ConfigError(f"config.noise.kind must be 'tabular' or 'bands', got {kind!r}")


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Noise


def _band_support(mean, spread, count):
    """Symmetric atoms mean + spread*linspace(-1,1,count) with binomial
    weights (dyadic, so small counts stay exact in floating point)."""
    mean = float(mean)
    count = int(count)
    if count < 1:
        raise ConfigError("atom count must be >= 1")
    if count == 1 or spread == 0:
        return np.array([mean]), np.array([1.0])
    levels = mean + float(spread) * np.linspace(-1.0, 1.0, count)
    weights = np.array([math.comb(count - 1, j) for j in range(count)], dtype=float)
    weights /= 2.0 ** (count - 1)
    return levels, weights


def build_noise(cfg):
    noise = cfg["noise"]
    if noise["kind"] == "tabular":
        atoms = noise["atoms"]
        weights = noise["weights"]
        if len(atoms) != len(weights) or len(atoms) < 2:
            raise ConfigError("tabular noise needs matching atoms/weights for t=0..T")
        return NoiseModel.from_lists(len(atoms) - 1, atoms, weights)
    dem = noise["demand"]
    means = [float(v) for v in dem["mean"]]
    T = len(means) - 1
    if T < 1:
        raise ConfigError("config.noise.demand.mean must cover t=0..T with T >= 1")
    d_atoms, d_weights = zip(
        *[_band_support(m, dem.get("spread", 0.0), dem.get("atoms", 1)) for m in means]
    )
    inflows = noise.get("inflows", [])
    coords = [int(b.get("coordinate", j + 1)) for j, b in enumerate(inflows)]
    if coords != list(range(1, len(inflows) + 1)):
        raise ConfigError("inflow coordinates must be 1..#inflows in order")
    in_atoms, in_weights = [], []
    for j, band in enumerate(inflows):
        m = [float(v) for v in band["mean"]]
        if len(m) != T + 1:
            raise ConfigError(f"config.noise.inflows[{j}].mean must have length T+1={T + 1}")
        pairs = [_band_support(v, band.get("spread", 0.0), band.get("atoms", 1)) for v in m]
        in_atoms.append([p[0] for p in pairs])
        in_weights.append([p[1] for p in pairs])
    return independent_noise(list(d_atoms), list(d_weights), in_atoms, in_weights)


# ---------------------------------------------------------------------------
# Problems


def _bounds_pair(raw, where):
    try:
        lo, hi = float(raw[0]), float(raw[1])
    except (TypeError, ValueError, IndexError):
        raise ConfigError(f"{where} must be a [lower, upper] pair") from None
    return lo, hi


def _unit_from_config(u, horizon, idx):
    where = f"config.problem.units[{idx}]"
    name = u.get("name", f"unit{idx}")
    cost = u.get("cost", {})
    c2 = float(cost.get("c2", 0.0))
    c1 = float(cost.get("c1", 0.0))
    weight = float(u.get("coupling_weight", 1.0))
    clo, chi = _bounds_pair(u["control_bounds"], f"{where}.control_bounds")

    def stage_cost(x, u_, xi, t):
        v = u_[..., 0]
        return c2 * v * v + c1 * v

    if u["kind"] == "static":
        return make_unit(
            name,
            horizon,
            control_dim=1,
            stage_cost=stage_cost,
            coupling=linear_coupling([weight]),
            control_bounds=([clo], [chi]),
            noise_coords=(),
        )
    slo, shi = _bounds_pair(u["state_bounds"], f"{where}.state_bounds")
    coord = int(u["inflow_coordinate"])
    k = float(u.get("terminal", {}).get("k", 0.0))

    def dynamics(x, u_, xi, t):
        return x - u_ + np.asarray(xi, dtype=float)[..., coord : coord + 1]

    def terminal(x):
        return k * x[..., 0]

    return make_unit(
        name,
        horizon,
        control_dim=1,
        state_dim=1,
        dynamics=dynamics,
        stage_cost=stage_cost,
        terminal_cost=terminal,
        coupling=linear_coupling([weight]),
        initial_state=[float(u["initial_state"])],
        state_bounds=([slo], [shi]),
        control_bounds=([clo], [chi]),
        noise_coords=(coord,),
    )


def build_problem(cfg):
    """ProblemSpec from either config family."""
    noise = build_noise(cfg)
    if "quadratic" in cfg:
        spec = build_quadratic(cfg, noise)
        q = cfg["quadratic"]
        slack = q.get("slack_unit", -1)
        return to_problem(
            spec,
            control_cap=q.get("control_cap"),
            state_cap=q.get("state_cap"),
            slack_unit=slack,
        )
    prob = cfg["problem"]
    units = [
        _unit_from_config(u, noise.horizon, idx) for idx, u in enumerate(prob["units"])
    ]
    slack = prob.get("slack_unit")
    if isinstance(slack, str):
        names = [u.name for u in units]
        if slack not in names:
            raise ConfigError(f"config.problem.slack_unit {slack!r} names no unit")
        slack = names.index(slack)
    return ProblemSpec(
        subsystems=tuple(units),
        noise=noise,
        coupling_dim=1,
        demand_coordinate=int(prob.get("demand_coordinate", 0)),
        slack_unit=slack,
        name=cfg.get("name", ""),
    )


def build_quadratic(cfg, noise=None):
    if "quadratic" not in cfg:
        raise ConfigError("config has no 'quadratic' section")
    if noise is None:
        noise = build_noise(cfg)
    q = cfg["quadratic"]
    return QuadraticSpec(
        costs=q["costs"],
        terminal_weights=q["terminal_weights"],
        initial_states=q["initial_states"],
        noise=noise,
    )


def dadp_settings(cfg, **overrides):
    """DadpConfig from the config's dadp section plus keyword overrides."""
    merged = dict(cfg.get("dadp", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    allowed = {f for f in _DADP_KEYS}
    extra = set(merged) - allowed
    if extra:
        raise ConfigError(f"unknown dadp settings: {sorted(extra)}")
    return DadpConfig(**merged)


def joint_settings(cfg):
    joint = cfg.get("joint", {})
    return {
        "state_grid": joint.get("state_grid", 51),
        "control_mesh": joint.get("control_mesh", 13),
        "dim_cap": int(joint.get("dim_cap", 3)),
        "eta": joint.get("eta"),
    }

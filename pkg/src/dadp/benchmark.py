"""Synthetic hydro-thermal scheduling instances.

Two reservoirs with cheap quadratic release costs and linear water values,
one thermal unit with convex increasing cost, coupled by a per-step demand
balance u1 + u2 + u3 = d_t.  Only mean profiles of the demand and inflows
are structural; the finite supports are symmetric bands around those means
with binomial weights (see the config schema).  The thermal bound tracks
the largest demand atom so the coupling is always closable through it.

Numbers here (capacities 50/40, release caps 6, water values -7/-12,
release cost 0.1 u^2, thermal cost u + u^2) are the conventional desk-scale
setting; the horizon and resolutions are arguments because the full T=25
study and the T=10 acceptance runs share everything else.
"""

from __future__ import annotations

import math

__all__ = ["demand_profile", "hydro_thermal_config", "quadratic_config"]


def demand_profile(horizon, base=5.0, swing=2.0):
    """Smooth seasonal mean demand for t = 0..T."""
    return [
        round(base + swing * math.sin(2.0 * math.pi * t / max(horizon, 1)), 6)
        for t in range(horizon + 1)
    ]


def hydro_thermal_config(
    horizon=10,
    *,
    demand_base=5.0,
    demand_swing=2.0,
    demand_spread=1.0,
    demand_atoms=3,
    inflow_means=(1.5, 1.0),
    inflow_spread=0.5,
    inflow_atoms=2,
    epsilon=0.1,
    capacities=(50.0, 40.0),
    release_caps=(6.0, 6.0),
    water_values=(-7.0, -12.0),
    initial_fill=0.5,
    thermal_cost=(1.0, 1.0),
    state_grid=None,
    control_mesh=13,
    step_size=0.1,
    sample_count=1000,
    stop_tol=1e-3,
    max_iters=100,
    lambda_grid_size=21,
    seed=0,
):
    """Full config dict for the two-reservoir benchmark."""
    dmean = demand_profile(horizon, demand_base, demand_swing)
    dmax = max(dmean) + demand_spread
    thermal_cap = float(math.ceil(dmax))
    units = []
    for i, (cap, rel, wv) in enumerate(zip(capacities, release_caps, water_values)):
        units.append(
            {
                "name": f"hydro{i + 1}",
                "kind": "storage",
                "initial_state": round(initial_fill * cap, 6),
                "state_bounds": [0.0, float(cap)],
                "control_bounds": [0.0, float(rel)],
                "cost": {"c2": float(epsilon)},
                "terminal": {"k": float(wv)},
                "inflow_coordinate": i + 1,
            }
        )
    units.append(
        {
            "name": "thermal",
            "kind": "static",
            "control_bounds": [0.0, thermal_cap],
            "cost": {"c1": float(thermal_cost[0]), "c2": float(thermal_cost[1])},
        }
    )
    inflows = [
        {
            "coordinate": i + 1,
            "mean": [float(m)] * (horizon + 1),
            "spread": float(inflow_spread),
            "atoms": int(inflow_atoms),
        }
        for i, m in enumerate(inflow_means)
    ]
    if state_grid is None:
        state_grid = [int(c) + 1 for c in capacities]  # unit spacing
    return {
        "schema": "dadp-config-1",
        "name": f"hydro-thermal-T{horizon}",
        "problem": {
            "units": units,
            "demand_coordinate": 0,
            "slack_unit": "thermal",
        },
        "noise": {
            "kind": "bands",
            "demand": {
                "mean": dmean,
                "spread": float(demand_spread),
                "atoms": int(demand_atoms),
            },
            "inflows": inflows,
        },
        "joint": {"state_grid": state_grid, "control_mesh": int(control_mesh)},
        "dadp": {
            "step_size": step_size,
            "sample_count": int(sample_count),
            "stop_tol": float(stop_tol),
            "max_iters": int(max_iters),
            "lambda_grid_size": int(lambda_grid_size),
            # per-unit entries; the stateless thermal ignores its own
            "state_grid_size": list(state_grid) + [1],
            "control_mesh_size": int(control_mesh),
            "seed": int(seed),
        },
    }


def quadratic_config(
    horizon=4,
    *,
    costs=(1.0, 2.0),
    alpha=0.0,
    initial_states=(0.0, 0.0),
    demand_mean=4.0,
    demand_spread=1.0,
    demand_atoms=2,
    inflow_means=(0.5, 0.5),
    inflow_spread=0.0,
    inflow_atoms=1,
    root_atom=0,
    warm_start=True,
    sample_count=500,
    max_iters=40,
    step_size=0.5,
    seed=0,
):
    """Config dict for the quadratic demand-splitting family."""
    inflows = [
        {
            "coordinate": i + 1,
            "mean": [float(m)] * (horizon + 1),
            "spread": float(inflow_spread),
            "atoms": int(inflow_atoms),
        }
        for i, m in enumerate(inflow_means)
    ]
    return {
        "schema": "dadp-config-1",
        "name": f"quadratic-split-T{horizon}",
        "quadratic": {
            "costs": [float(c) for c in costs],
            "terminal_weights": [round(alpha * float(c), 12) for c in costs],
            "initial_states": [float(x) for x in initial_states],
            "root_atom": int(root_atom),
            "warm_start": bool(warm_start),
        },
        "noise": {
            "kind": "bands",
            "demand": {
                "mean": [float(demand_mean)] * (horizon + 1),
                "spread": float(demand_spread),
                "atoms": int(demand_atoms),
            },
            "inflows": inflows,
        },
        "joint": {"state_grid": 41, "control_mesh": 17},
        "dadp": {
            "step_size": step_size,
            "sample_count": int(sample_count),
            "max_iters": int(max_iters),
            "seed": int(seed),
        },
    }

"""The small dam + plant instance the solver demos share."""

import numpy as np

from dadp import NoiseModel, ProblemSpec, linear_coupling, make_unit, validate

T = 4


def toy_problem():
    atoms = [np.array([[3.0, 1.0], [5.0, 2.0]]) for _ in range(T + 1)]
    weights = [np.array([0.5, 0.5]) for _ in range(T + 1)]
    noise = NoiseModel(T, atoms, weights)
    dam = make_unit(
        "dam",
        T,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u + xi[..., 1:2],
        stage_cost=lambda x, u, xi, t: 0.05 * u[..., 0] ** 2,
        terminal_cost=lambda x: -3.0 * x[..., 0],
        coupling=linear_coupling([1.0]),
        initial_state=[6.0],
        state_bounds=(0.0, 12.0),
        control_bounds=(0.0, 3.0),
        noise_coords=(1,),
    )
    plant = make_unit(
        "plant",
        T,
        control_dim=1,
        stage_cost=lambda x, u, xi, t: u[..., 0] + 0.5 * u[..., 0] ** 2,
        coupling=linear_coupling([1.0]),
        control_bounds=(0.0, 6.0),
        noise_coords=(),
    )
    spec = ProblemSpec(
        subsystems=(dam, plant),
        noise=noise,
        coupling_dim=1,
        demand_coordinate=0,
        slack_unit=1,
    )
    return validate(spec)

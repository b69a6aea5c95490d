"""Build a two-unit coupled problem by hand and poke at its pieces.

A storage unit (a dam: stock moves as x - u + inflow) and a stateless
thermal plant share a demand balance: dam release plus thermal output
must equal the demand drawn each step.  Nothing is solved here -- this
is just the modelling layer.
"""

import numpy as np

from dadp import (
    NoiseModel,
    ProblemSpec,
    coupling_residual,
    linear_coupling,
    make_unit,
    pathwise_cost,
    sample_paths,
    validate,
)

T = 4

# --- noise: xi_t = (demand, inflow), two equally likely atoms per step ------
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
    terminal_cost=lambda x: -3.0 * x[..., 0],   # leftover water has value
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
    demand_coordinate=0,   # xi[0] is the demand the units must meet
    slack_unit=1,          # the plant can absorb any imbalance
)
vp = validate(spec)
print("problem:", [u.name for u in vp.subsystems], "horizon", vp.T)
print("joint state dim", vp.total_state_dim, "| coupling dim", vp.spec.coupling_dim)

# --- scenarios are reproducible from their seeds ---------------------------
paths = sample_paths(noise, seed=42, count=3)
for p in paths:
    print("path demands", p.realizations[:T, 0], "inflows", p.realizations[:T, 1])

# --- a hand-made policy: release 2, plant covers the rest ------------------
path = paths[0]
x = np.zeros((T + 1, 1))
x[0] = 6.0
u_dam = np.full((T, 1), 2.0)
for t in range(T):
    x[t + 1] = x[t] - u_dam[t] + path.realizations[t + 1, 1]
u_plant = (path.realizations[:T, 0] - u_dam[:, 0]).reshape(T, 1)

cost = pathwise_cost(vp, path, [x, np.zeros((T + 1, 0))], [u_dam, u_plant])
print("hand policy cost on path 0:", cost)

# the balance closes by construction; shorting the plant leaves a residual
for t in range(T):
    r = coupling_residual(vp, t, [x[t], np.zeros(0)], [u_dam[t], u_plant[t]],
                          xi=path.realizations[t])
    assert abs(float(r[0])) < 1e-12
bad = coupling_residual(vp, 0, [x[0], np.zeros(0)], [u_dam[0], u_plant[0] - 1.0],
                        xi=path.realizations[0])
print("residual after shorting the plant by 1:", float(bad[0]))

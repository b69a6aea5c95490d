"""The quadratic demand-splitting family and its closed-form multipliers.

N units with cost c_i/2 u^2 and terminal penalty gamma_i/2 (x_T - x_0)^2
split a random demand; when gamma_i = alpha c_i for a common alpha, the
equilibrium multiplier follows an explicit affine recursion in the
demand.  An exact scenario-tree KKT solve provides the cross-check, and
the closed form seeds ("warm starts") the coordination loop.
"""

import numpy as np

from dadp import (
    QuadraticSpec,
    ScenarioTree,
    closed_form_lambda,
    independent_noise,
    verify_proposition,
    warm_start,
)
from dadp.model import NoisePath

T = 4
alpha = 0.5
costs = np.array([1.0, 2.0, 4.0])

demand_atoms = [[3.0, 5.0]] * (T + 1)              # two equally likely branches
demand_weights = [[0.5, 0.5]] * (T + 1)
inflow_atoms = [[[0.3]] * (T + 1), [[0.2]] * (T + 1), [[0.1]] * (T + 1)]
inflow_weights = [[[1.0]] * (T + 1)] * 3
noise = independent_noise(demand_atoms, demand_weights, inflow_atoms, inflow_weights)

spec = QuadraticSpec(costs, alpha * costs, initial_states=[5.0, 4.0, 3.0], noise=noise)

tree = ScenarioTree.build(spec.noise, root_atom=0)
print("scenario tree nodes per level:", [len(x) for x in tree.xi])

# closed form vs KKT, node by node over the whole tree
report = verify_proposition(spec, tree)
print(report.text())

# the recursion written out on one scenario (the all-first-branch one)
xi = np.stack([tree.xi[t][0] for t in range(T + 1)])
path = NoisePath(realizations=xi, atom_indices=np.zeros(T + 1, dtype=int), seed=0)
lam = closed_form_lambda(spec, path)
print("\nclosed-form lambda on the first branch:", np.round(lam, 6))

# With no terminal coupling (alpha = 0) the optimum is myopic: marginal
# cost equals the price in every unit, c_i u_i = lam_t, so the demand
# splits as u_i = lam_t / c_i with cheap units carrying more of it.
flat = QuadraticSpec(costs, 0.0 * costs, [5.0, 4.0, 3.0], noise)
lam_flat = closed_form_lambda(flat, path)
u0 = lam_flat[0] / costs
print("alpha=0 lambda on that branch:", np.round(lam_flat, 6))
print("t=0 split u_i = lam/c_i:", np.round(u0, 4),
      " sums to d_0 =", round(float(u0.sum()), 6))

# The coordination loop dualizes the balance with the opposite sign, so the
# warm start fits the negated trajectories; with alpha = 0 the fit is exact
# with beta_t = -1/C where C = sum(1/c_i).
model = warm_start(flat, sample_count=100, seed=1)
C = float(np.sum(1.0 / costs))
print("\nwarm-start beta per step:", np.round(model.beta[:, 0], 6))
print("          -1/C reference:", round(-1.0 / C, 6))

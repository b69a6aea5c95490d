"""Coordinate the units through prices instead of solving them jointly.

Each iteration: solve one dynamic program per unit against the current
multiplier model, simulate all units on common noise paths, move the
multipliers along the sampled balance violation, then project the moved
paths back onto the autoregressive price family.  The dual estimates
climb toward the joint optimum from below (up to sampling noise), and a
feasible primal policy comes out of letting the slack unit close the
balance.
"""

import numpy as np

from dadp import DadpConfig, joint_solve, regular_state_grids, run, uniform_mesh

from _shared import toy_problem

vp = toy_problem()

# exact reference (cheap at this size, see 02_joint_reference_solve.py)
reference = joint_solve(vp, regular_state_grids(vp, 25), uniform_mesh(vp, 9)).optimal_cost
print(f"joint optimum for reference: {reference:.4f}\n")

cfg = DadpConfig(
    step_size=0.2,
    sample_count=2000,
    stop_tol=1e-4,
    max_iters=30,
    lambda_grid_size=17,
    state_grid_size=[25, 1],
    control_mesh_size=[13, 17],
    seed=3,
)
res = run(vp, cfg)

print(" k     dual      se    primal      se   viol_rms    dlam")
for it in res.iterates:
    print(
        f"{it.index:2d} {it.dual:9.4f} {it.dual_stderr:5.2f} {it.primal:9.4f} "
        f"{it.primal_stderr:5.2f} {float(np.mean(it.violation_rms)):9.4f} {it.delta_lambda:8.4f}"
    )

best = res.best
print(f"\nterminated: {res.termination} after {len(res.iterates)} iterations")
print(f"best dual   {best.dual:.4f} +- {best.dual_stderr:.4f}  (iteration {best.index})")
print(f"best primal {best.primal:.4f} +- {best.primal_stderr:.4f}  gap {best.gap:.4f}")
print(f"relative distance to joint optimum: {abs(reference - best.dual) / abs(reference):.4%}")

# weak duality held the whole way (up to 3 standard errors)
slack = [it.dual - reference - 3 * it.dual_stderr for it in res.iterates]
print("max (dual - optimum - 3se) over iterates:", f"{max(slack):.4f}  (should be <= 0)")

# the fitted price model is tiny: one (alpha, beta, gamma) triple per step
m = res.iterates[best.index].model
print("\nbest multiplier model (lam_t = alpha_t lam_(t-1) + beta_t d_t + gamma_t):")
for t in range(m.horizon):
    a = float(m.alpha[t, 0, 0]) if t else float("nan")
    print(f"  t={t}: alpha={a:7.4f}  beta={float(m.beta[t, 0]):7.4f}  gamma={float(m.gamma[t, 0]):7.4f}")

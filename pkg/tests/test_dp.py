"""Backward-induction solver: interpolation, Bellman steps, joint reference."""

import numpy as np
import pytest

from dadp import (
    ControlMesh,
    Grid,
    NoiseModel,
    ProblemSpec,
    SolverError,
    ValueFunction,
    backward_sweep,
    bellman_update,
    interpolate,
    joint_solve,
    linear_coupling,
    make_unit,
    pathwise_cost,
    sample_paths,
    validate,
)
from dadp.dp import read_solution_csv, simulate_joint, write_solution_csv

from oracles import tiny_instance, tree_search_optimum


def _dirac_noise(horizon, value=0.0, width=1):
    atoms = [np.full((1, width), value) for _ in range(horizon + 1)]
    return NoiseModel(horizon, atoms, [np.array([1.0])] * (horizon + 1))


def _storage_problem(horizon, *, c2=0.0, c1=0.0, k=0.0, x0=10.0, box=(0.0, 40.0),
                     ubox=(0.0, 6.0), noise=None, inflow_coord=None):
    if inflow_coord is None:
        dyn = lambda x, u, xi, t: x - u
    else:
        dyn = lambda x, u, xi, t: x - u + xi[..., inflow_coord : inflow_coord + 1]
    unit = make_unit(
        "dam",
        horizon,
        state_dim=1,
        control_dim=1,
        dynamics=dyn,
        stage_cost=lambda x, u, xi, t: c2 * u[..., 0] ** 2 + c1 * u[..., 0],
        terminal_cost=lambda x: k * x[..., 0],
        initial_state=[x0],
        state_bounds=box,
        control_bounds=ubox,
    )
    noise = noise if noise is not None else _dirac_noise(horizon)
    return validate(ProblemSpec([unit], noise, 1, demand_coordinate=None))


# ------------------------------------------------------------- interpolate


def test_interpolate_nodal_values_exact():
    rng = np.random.default_rng(0)
    grid = Grid((np.array([0.0, 1.0, 3.0]), np.array([-2.0, 0.5, 1.0, 4.0])))
    vals = rng.normal(size=grid.shape)
    vf = ValueFunction(0, grid, vals)
    for i, xv in enumerate(grid.levels[0]):
        for j, yv in enumerate(grid.levels[1]):
            assert interpolate(vf, np.array([xv, yv])) == vals[i, j]


def test_interpolate_midpoint():
    vf = ValueFunction(0, Grid((np.array([0.0, 1.0]),)), np.array([2.0, 4.0]))
    assert interpolate(vf, np.array([0.5])) == pytest.approx(3.0)


def test_interpolate_matches_bilinear_formula():
    """Random 2-D queries against a hand-written bilinear expression."""
    rng = np.random.default_rng(1)
    gx = np.sort(rng.uniform(0, 10, size=5))
    gy = np.sort(rng.uniform(-3, 3, size=4))
    vals = rng.normal(size=(5, 4))
    vf = ValueFunction(0, Grid((gx, gy)), vals)
    for _ in range(50):
        x = rng.uniform(gx[0], gx[-1])
        y = rng.uniform(gy[0], gy[-1])
        i = np.clip(np.searchsorted(gx, x) - 1, 0, 3)
        j = np.clip(np.searchsorted(gy, y) - 1, 0, 2)
        fx = (x - gx[i]) / (gx[i + 1] - gx[i])
        fy = (y - gy[j]) / (gy[j + 1] - gy[j])
        ref = (
            (1 - fx) * (1 - fy) * vals[i, j]
            + (1 - fx) * fy * vals[i, j + 1]
            + fx * (1 - fy) * vals[i + 1, j]
            + fx * fy * vals[i + 1, j + 1]
        )
        assert interpolate(vf, np.array([x, y])) == pytest.approx(ref, abs=1e-12)


def test_interpolate_inf_corners():
    vals = np.array([1.0, np.inf, 5.0])
    vf = ValueFunction(0, Grid((np.array([0.0, 1.0, 2.0]),)), vals)
    # positive weight on the infeasible corner forces +inf ...
    assert interpolate(vf, np.array([0.5])) == np.inf
    # ... but an exact node hit beside it is untouched
    assert interpolate(vf, np.array([0.0])) == 1.0
    assert interpolate(vf, np.array([2.0])) == 5.0


def test_interpolate_outside_hull_raises():
    vf = ValueFunction(0, Grid((np.array([0.0, 1.0]),)), np.array([0.0, 1.0]))
    with pytest.raises(SolverError):
        interpolate(vf, np.array([1.5]))


# ----------------------------------------------------------- bellman_update


def test_bellman_zero_costs():
    vp = _storage_problem(2, box=(0.0, 40.0))
    grid = Grid((np.linspace(0.0, 40.0, 5),))
    nxt = ValueFunction(1, grid, np.zeros(5))
    mesh = ControlMesh(((np.linspace(0, 6, 4).reshape(-1, 1),) * 2,))
    res = bellman_update(vp, 0, np.array([20.0]), nxt, mesh)
    assert res.value == 0.0
    assert 0.0 <= res.control[0] <= 6.0


def test_bellman_picks_cheaper_candidate():
    # candidates u = 0 and u = 1 cost 3 and 5; ties cannot occur, the
    # minimizer must be the first candidate
    unit_costly = make_unit(
        "dam",
        1,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u,
        stage_cost=lambda x, u, xi, t: 3.0 + 2.0 * u[..., 0],
        initial_state=[10.0],
        state_bounds=(0.0, 40.0),
        control_bounds=(0.0, 6.0),
    )
    vp = validate(ProblemSpec([unit_costly], _dirac_noise(1), 1, demand_coordinate=None))
    grid = Grid((np.linspace(0.0, 40.0, 9),))
    nxt = ValueFunction(1, grid, np.zeros(9))
    mesh = ControlMesh(((np.array([[0.0], [1.0]]),),))
    res = bellman_update(vp, 0, np.array([10.0]), nxt, mesh)
    assert res.value == pytest.approx(3.0)
    assert res.control[0] == 0.0


def test_bellman_matches_exhaustive_enumeration():
    """Random one-unit stages against candidate-by-atom enumeration.

    The reference interpolates with np.interp, an implementation the solver
    does not share.
    """
    rng = np.random.default_rng(7)
    for _ in range(10):
        c2, c1 = rng.uniform(0.05, 1.0), rng.uniform(-1.0, 1.0)
        box = (0.0, 12.0)
        atoms = [np.array([[rng.uniform(0, 2)], [rng.uniform(0, 2)]]) for _ in range(3)]
        noise = NoiseModel(2, atoms, [np.array([0.5, 0.5])] * 3)
        vp = _storage_problem(2, c2=c2, c1=c1, box=box, noise=noise, inflow_coord=0)
        levels = np.array([0.0, 5.0, 12.0])  # 3 nodes
        nodal = rng.normal(size=3)
        nxt = ValueFunction(1, Grid((levels,)), nodal)
        cands = np.sort(rng.uniform(0, 4, size=4)).reshape(-1, 1)
        mesh = ControlMesh(((cands,) * 2,))
        x = np.array([rng.uniform(3, 8)])

        res = bellman_update(vp, 0, x, nxt, mesh)

        best_v, best_u = np.inf, None
        for u in cands[:, 0]:
            ev, feasible = 0.0, True
            for k in range(2):
                a = atoms[1][k, 0]
                x_next = x[0] - u + a
                if not (box[0] - 1e-9 <= x_next <= box[1] + 1e-9):
                    feasible = False
                    break
                ev += 0.5 * (c2 * u**2 + c1 * u + np.interp(x_next, levels, nodal))
            if feasible and ev < best_v:
                best_v, best_u = ev, u
        assert res.value == pytest.approx(best_v, abs=1e-12)
        assert res.control[0] == pytest.approx(best_u, abs=1e-12)


def test_bellman_infeasible_state():
    # from x = 0 every positive release leaves the box; with u >= 1 candidates
    # only, no admissible control remains
    vp = _storage_problem(1, box=(0.0, 10.0), x0=0.0)
    grid = Grid((np.linspace(0.0, 10.0, 5),))
    nxt = ValueFunction(1, grid, np.zeros(5))
    mesh = ControlMesh(((np.array([[1.0], [2.0]]),),))
    res = bellman_update(vp, 0, np.array([0.0]), nxt, mesh)
    assert res.value == np.inf
    assert np.all(np.isnan(res.controls))


# ---------------------------------------------------------- backward_sweep


def test_sweep_single_step_by_hand():
    # V_0(x) = min over u in {0, 2} of [u - 2 E(x - u + a)], a in {0, 1}
    # equally likely; the expected values are unrolled by hand below
    horizon = 1
    noise = NoiseModel(1, [np.array([[0.0], [1.0]])] * 2, [np.array([0.5, 0.5])] * 2)
    vp = _storage_problem(horizon, c2=0.0, c1=1.0, k=-2.0, box=(0.0, 30.0), noise=noise,
                          inflow_coord=0)
    grids = [Grid((np.linspace(0.0, 30.0, 31),))] * 2
    mesh = ControlMesh(((np.array([[0.0], [2.0]]),),))
    sol = backward_sweep(vp, grids, mesh)
    for x in (10.0, 15.0):
        v0 = float(np.mean([1.0 * 0.0 - 2.0 * (x - 0.0 + a) for a in (0.0, 1.0)]))
        v2 = float(np.mean([1.0 * 2.0 - 2.0 * (x - 2.0 + a) for a in (0.0, 1.0)]))
        want = min(v0, v2)
        assert interpolate(sol.value_functions[0], np.array([x])) == pytest.approx(want, abs=1e-12)


def test_sweep_terminal_from_water_value():
    vp = _storage_problem(2, k=-7.0, box=(0.0, 50.0))
    grids = [Grid((np.array([0.0, 25.0, 50.0]),))] * 3
    mesh = ControlMesh(((np.array([[0.0]]),) * 2,))
    sol = backward_sweep(vp, grids, mesh)
    assert np.array_equal(sol.value_functions[2].values, np.array([0.0, -175.0, -350.0]))


def test_tiny_joint_equals_tree_search():
    """Integer-lattice instances: grid DP and exhaustive tree search agree
    to the last bit (no interpolation error by construction)."""
    for seed in range(5):
        vp, grids, mesh = tiny_instance(seed)
        sol = joint_solve(vp, grids, mesh)
        assert sol.optimal_cost == tree_search_optimum(vp, mesh)


def test_joint_forced_by_coupling():
    # one unit whose control is solved from u = d_t: no choice remains
    horizon = 3
    demands = [3.0, 1.0, 2.0]
    atoms = [np.array([[demands[t] if t < 3 else 0.0]]) for t in range(horizon + 1)]
    noise = NoiseModel(horizon, atoms, [np.array([1.0])] * (horizon + 1))
    unit = make_unit(
        "dam",
        horizon,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u,
        stage_cost=lambda x, u, xi, t: u[..., 0] ** 2,
        terminal_cost=lambda x: -1.0 * x[..., 0],
        coupling=linear_coupling([1.0]),
        initial_state=[10.0],
        state_bounds=(0.0, 20.0),
        control_bounds=(0.0, 6.0),
    )
    vp = validate(ProblemSpec([unit], noise, 1, demand_coordinate=0, slack_unit=0))
    grids = [Grid((np.linspace(0.0, 20.0, 21),))] * (horizon + 1)
    mesh = ControlMesh(((np.array([[0.0]]),) * horizon,))
    sol = joint_solve(vp, grids, mesh)
    expected = sum(d**2 for d in demands) - (10.0 - sum(demands))
    assert sol.optimal_cost == pytest.approx(expected, abs=1e-9)


def test_sweep_rejects_uncovering_grid():
    vp = _storage_problem(1, box=(0.0, 10.0))
    grids = [Grid((np.linspace(0.0, 5.0, 3),))] * 2  # stops short of the box
    mesh = ControlMesh(((np.array([[0.0]]),),))
    with pytest.raises(SolverError, match="cover"):
        backward_sweep(vp, grids, mesh)


# ------------------------------------------------- properties and round-trip


def test_cost_increase_never_lowers_values():
    """Pointwise larger stage and terminal costs give pointwise larger V_t."""
    noise = NoiseModel(2, [np.array([[0.0], [1.0]])] * 3, [np.array([0.5, 0.5])] * 3)
    lo = _storage_problem(2, c2=0.3, c1=0.0, k=-3.0, box=(0.0, 20.0), noise=noise, inflow_coord=0)
    hi = _storage_problem(2, c2=0.3, c1=0.4, k=-3.0, box=(0.0, 20.0), noise=noise, inflow_coord=0)
    # c1 0 -> 0.4 raises every stage cost (u >= 0); terminal +1 raises V_T
    hi_unit = make_unit(
        "dam",
        2,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u + xi[..., 0:1],
        stage_cost=lambda x, u, xi, t: 0.3 * u[..., 0] ** 2 + 0.4 * u[..., 0],
        terminal_cost=lambda x: -3.0 * x[..., 0] + 1.0,
        initial_state=[10.0],
        state_bounds=(0.0, 20.0),
        control_bounds=(0.0, 6.0),
    )
    hi = validate(ProblemSpec([hi_unit], noise, 1, demand_coordinate=None))
    grids = [Grid((np.linspace(0.0, 20.0, 21),))] * 3
    mesh = ControlMesh(((np.linspace(0, 6, 7).reshape(-1, 1),) * 2,))
    sol_lo = backward_sweep(lo, grids, mesh)
    sol_hi = backward_sweep(hi, grids, mesh)
    for t in range(3):
        a, b = sol_lo.value_functions[t].values, sol_hi.value_functions[t].values
        finite = np.isfinite(a) & np.isfinite(b)
        assert np.all(b[finite] >= a[finite] - 1e-12)
        assert np.array_equal(np.isfinite(a), np.isfinite(b))


def test_feasibility_propagates():
    # u = 0 is always admissible here, so every node stays finite
    vp = _storage_problem(3, c2=0.1, box=(0.0, 15.0))
    grids = [Grid((np.linspace(0.0, 15.0, 16),))] * 4
    mesh = ControlMesh(((np.array([[0.0], [1.0]]),) * 3,))
    sol = backward_sweep(vp, grids, mesh)
    for vf in sol.value_functions:
        assert np.all(np.isfinite(vf.values))


def _curved_instance(seed, mesh_count):
    """Off-lattice coupled instance with quadratic terminals, so grid
    interpolation error is actually visible."""
    rng = np.random.default_rng(seed)
    horizon = 3
    demands = [sorted(rng.choice(np.arange(1, 7), size=2, replace=False)) for _ in range(horizon + 1)]
    inflows = [rng.uniform(0.0, 1.5, size=2) for _ in range(horizon + 1)]
    atoms = [
        np.array([[float(demands[t][k]), inflows[t][k]] for k in range(2)])
        for t in range(horizon + 1)
    ]
    noise = NoiseModel(horizon, atoms, [np.array([0.5, 0.5])] * (horizon + 1))
    c_a, c_b = rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6)
    g_a, g_b = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)
    upper = make_unit(
        "upper", horizon, state_dim=1, control_dim=1,
        dynamics=lambda x, u, xi, t: x - u + xi[..., 1:2],
        stage_cost=lambda x, u, xi, t: c_a * u[..., 0] ** 2,
        terminal_cost=lambda x: 0.5 * g_a * (x[..., 0] - 3.0) ** 2,
        coupling=linear_coupling([1.0]),
        initial_state=[3.0], state_bounds=(-20.0, 26.0), control_bounds=(0.0, 3.0),
        noise_coords=(1,),
    )
    lower = make_unit(
        "lower", horizon, state_dim=1, control_dim=1,
        dynamics=lambda x, u, xi, t: x - u,
        stage_cost=lambda x, u, xi, t: c_b * u[..., 0] ** 2,
        terminal_cost=lambda x: 0.5 * g_b * (x[..., 0] - 4.0) ** 2,
        coupling=linear_coupling([1.0]),
        initial_state=[4.0], state_bounds=(-20.0, 26.0), control_bounds=(-8.0, 8.0),
        noise_coords=(),
    )
    vp = validate(ProblemSpec([upper, lower], noise, 1, demand_coordinate=0, slack_unit=1))
    mesh_a = [np.linspace(0.0, 3.0, mesh_count).reshape(-1, 1) for _ in range(horizon)]
    mesh_b = [np.zeros((1, 1)) for _ in range(horizon)]
    return vp, ControlMesh((tuple(mesh_a), tuple(mesh_b)))


def test_refinement_approaches_tree_value():
    """Halving the grid and doubling candidates shrinks the gap to the
    exhaustive tree value (upper bound, since the values are convex)."""
    for seed in (1, 2):
        errors = []
        for spacing, count in ((2.0, 4), (1.0, 8), (0.5, 16)):
            vp, mesh = _curved_instance(seed, count)
            grids = [
                Grid((np.arange(-20.0, 26.1, spacing), np.arange(-20.0, 26.1, spacing)))
                for _ in range(4)
            ]
            dp_val = joint_solve(vp, grids, mesh).optimal_cost
            tree = tree_search_optimum(vp, mesh)
            assert dp_val >= tree - 1e-9  # interpolating a convex V overestimates
            errors.append(abs(dp_val - tree))
        assert errors[1] < errors[0]
        assert errors[2] < errors[1]


def test_joint_policy_admissible():
    vp, grids, mesh = tiny_instance(3)
    sol = joint_solve(vp, grids, mesh)
    pol = sol.sweep.policy
    spec = vp.spec
    for t in range(vp.T):
        table = pol.tables[t]  # (J, G, m_total)
        targets = pol.target_values[t]
        nodes = sol.sweep.grids[t].nodes()
        for j in range(table.shape[0]):
            for g in range(table.shape[1]):
                u = table[j, g]
                if np.any(np.isnan(u)):
                    continue
                total = 0.0
                for i, unit in enumerate(spec.subsystems):
                    ui = u[vp.control_slices[i]]
                    assert np.all(ui >= unit.control_lower[t] - 1e-9)
                    assert np.all(ui <= unit.control_upper[t] + 1e-9)
                    xi_state = nodes[g][vp.state_slices[i]]
                    total += float(unit.coupling(xi_state[None, :], ui[None, :], t)[0, 0])
                assert abs(total - targets[j, 0]) <= 1e-9


def test_simulated_trajectories_consistent():
    """Forward simulation of the joint policy: zero residuals, and the
    recorded costs re-add through the pathwise evaluator."""
    vp, grids, mesh = tiny_instance(4)
    sol = joint_solve(vp, grids, mesh)
    paths = sample_paths(vp.spec.noise, 11, 10)
    traj = simulate_joint(vp, sol.sweep, paths)
    assert np.max(np.abs(traj.residuals)) <= 1e-9
    for p, path in enumerate(paths):
        states = [traj.states[p][:, vp.state_slices[i]] for i in range(2)]
        controls = [traj.controls[p][:, vp.control_slices[i]] for i in range(2)]
        total = pathwise_cost(vp.spec, path, states, controls)
        assert total == pytest.approx(traj.total_costs[p], abs=1e-9)


def test_solution_csv_round_trip(tmp_path):
    vp, grids, mesh = tiny_instance(5)
    sol = joint_solve(vp, grids, mesh)
    out = tmp_path / "solution.csv"
    write_solution_csv(sol.sweep, out)
    back = read_solution_csv(out)
    assert len(back["grids"]) == len(sol.sweep.grids)
    for g_in, g_out in zip(sol.sweep.grids, back["grids"]):
        for a, b in zip(g_in.levels, g_out.levels):
            assert np.array_equal(a, b)
    for t in range(vp.T + 1):
        assert np.array_equal(back["values"][t], sol.sweep.value_functions[t].values)
    for t in range(vp.T):
        got, want = back["tables"][t], sol.sweep.policy.tables[t]
        assert np.array_equal(np.isnan(got), np.isnan(want))
        assert np.array_equal(got[~np.isnan(got)], want[~np.isnan(want)])

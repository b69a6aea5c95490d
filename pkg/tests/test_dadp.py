"""Coordination loop: augmented subproblems, simulation, dual/primal estimates."""

import numpy as np
import pytest

from dadp import (
    DadpConfig,
    DadpError,
    NoiseModel,
    PriceModel,
    ProblemSpec,
    QuadraticSpec,
    ScenarioTree,
    SolverError,
    backward_sweep,
    build_subproblem,
    dual_value,
    gradient_step,
    kkt_solve,
    make_unit,
    linear_coupling,
    pathwise_cost,
    primal_value,
    run,
    sample_paths,
    simulate_iterate,
    solve_subproblems,
    support_range,
    to_problem,
    validate,
    warm_start,
)
from dadp.coordination import SimulationRecord, iteration_seed, restore_feasible
from dadp.dp import ControlMesh, regular_state_grids
from dadp.model import NoisePath
from dadp.prices import propagate_demands
from dadp.quadratic import independent_noise


def _dirac(horizon, atom):
    """Single-atom noise; coordinate 0 is the demand."""
    a = np.asarray(atom, dtype=float).reshape(1, -1)
    return NoiseModel(horizon, [a] * (horizon + 1), [np.array([1.0])] * (horizon + 1))


def _two_atom(horizon, atoms):
    a = np.asarray(atoms, dtype=float)
    return NoiseModel(horizon, [a] * (horizon + 1), [np.array([0.5, 0.5])] * (horizon + 1))


def _pull(target, weight=1.0):
    """Quadratic stage cost pulling the scalar control toward ``target``."""
    return lambda x, u, xi, t: weight * (u[..., 0] - target) ** 2


def _stateless(name, horizon, cost, lo, hi):
    return make_unit(
        name,
        horizon,
        control_dim=1,
        stage_cost=cost,
        coupling=linear_coupling([1.0]),
        control_bounds=(lo, hi),
    )


def _constant_model(horizon, value):
    return PriceModel.from_scalars(
        np.zeros(horizon - 1), np.zeros(horizon), np.full(horizon, float(value))
    )


# ----------------------------------------------------------- build_subproblem


def test_augmented_stage_cost_adds_price_term():
    # storage unit with cost eps*u^2 contributing g = u: the augmented unit
    # must charge eps*u^2 + lambda*u at the multiplier carried in its state
    T = 3
    eps = 0.1
    unit = make_unit(
        "hydro",
        T,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u,
        stage_cost=lambda x, u, xi, t: eps * u[..., 0] ** 2,
        terminal_cost=lambda x: -7.0 * x[..., 0],
        coupling=linear_coupling([1.0]),
        initial_state=[10.0],
        state_bounds=(0.0, 20.0),
        control_bounds=(0.0, 6.0),
    )
    vp = validate(ProblemSpec([unit], _dirac(T, [4.0]), 1, demand_coordinate=0))
    sub = build_subproblem(vp, 0, _constant_model(T, 2.5))
    aug = sub.vp.spec.subsystems[0]
    xi = np.array([[4.0]])
    for lam, u in [(2.5, 3.0), (-1.25, 2.0), (0.0, 5.0)]:
        got = aug.stage_cost(np.array([[12.0, lam]]), np.array([[u]]), xi, 0)
        assert np.allclose(got, eps * u**2 + lam * u, atol=1e-12)


def test_augmented_dynamics_propagate_multiplier():
    """lambda follows its recursion driven by the next observed demand; the
    final step carries it unchanged and the terminal cost ignores it."""
    T = 3
    unit = _stateless("plant", T, _pull(1.0), 0.0, 4.0)
    vp = validate(ProblemSpec([unit], _dirac(T, [4.0]), 1, demand_coordinate=0))
    model = PriceModel.from_scalars(np.full(T - 1, 0.5), np.full(T, 0.25), np.ones(T))
    sub = build_subproblem(vp, 0, model)
    aug = sub.vp.spec.subsystems[0]
    lam = 3.0
    xi_next = np.array([[6.0]])
    nxt = aug.dynamics(np.array([[lam]]), np.array([[2.0]]), xi_next, 0)
    assert np.allclose(nxt, 0.5 * lam + 0.25 * 6.0 + 1.0, atol=1e-12)
    last = aug.dynamics(np.array([[lam]]), np.array([[2.0]]), xi_next, T - 1)
    assert np.array_equal(last, [[lam]])

    lo, hi = support_range(model, vp.spec.noise, 0, 0.1)
    assert np.allclose(aug.initial_state[-1:], 0.5 * (lo[0] + hi[0]), atol=1e-12)


def test_build_subproblem_needs_demand_coordinate():
    T = 2
    unit = _stateless("plant", T, _pull(1.0), 0.0, 4.0)
    vp = validate(ProblemSpec([unit], _dirac(T, [4.0]), 1, demand_coordinate=None))
    with pytest.raises(DadpError, match="demand_coordinate"):
        build_subproblem(vp, 0, _constant_model(T, 0.0))


def test_build_subproblem_rejects_model_shape_mismatch():
    T = 3
    unit = _stateless("plant", T, _pull(1.0), 0.0, 4.0)
    vp = validate(ProblemSpec([unit], _dirac(T, [4.0]), 1, demand_coordinate=0))
    with pytest.raises(DadpError, match="does not match"):
        build_subproblem(vp, 0, _constant_model(T + 1, 0.0))


def test_constant_price_interior_argmin_within_one_mesh_step():
    # cost (c_i/2) u^2 against constant price c: the analytic minimizer is
    # u = -c/c_i, and the meshed subproblem must land within one spacing
    T = 2
    c_i, lam = 1.5, 2.0
    unit = _stateless("quad", T, lambda x, u, xi, t: 0.5 * c_i * u[..., 0] ** 2, -10.0, 10.0)
    vp = validate(ProblemSpec([unit], _dirac(T, [4.0]), 1, demand_coordinate=0))
    cfg = DadpConfig(sample_count=1, control_mesh_size=41, lambda_grid_size=5, seed=0)
    sols = solve_subproblems(vp, _constant_model(T, lam), cfg)
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, 1))
    spacing = 20.0 / 40
    assert np.all(np.abs(rec.controls[0] - (-lam / c_i)) <= spacing + 1e-12)


# --------------------------------------------------------- solve_subproblems


def test_zero_price_subproblem_equals_plain_sweep():
    """With no coupling contribution and the zero model the augmented tables
    must reproduce a plain single-unit sweep node for node."""
    T = 3
    unit = make_unit(
        "dam",
        T,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u + xi[..., 1:2],
        stage_cost=lambda x, u, xi, t: 0.3 * u[..., 0] ** 2 - u[..., 0],
        terminal_cost=lambda x: -2.0 * x[..., 0],
        initial_state=[5.0],
        state_bounds=(0.0, 12.0),
        control_bounds=(0.0, 4.0),
    )
    noise = _two_atom(T, [[1.0, 0.0], [3.0, 2.0]])
    vp = validate(ProblemSpec([unit], noise, 1, demand_coordinate=0))
    cfg = DadpConfig(state_grid_size=13, lambda_grid_size=7, control_mesh_size=9)
    sols = solve_subproblems(vp, PriceModel.zero(T, 1), cfg)

    grids = regular_state_grids(vp, [13])
    mesh = ControlMesh.uniform(vp, [9])
    plain = backward_sweep(vp, grids, mesh, coupled=False)
    for t in range(T + 1):
        aug = sols[0].sweep.conditioned[t]
        assert np.array_equal(aug, plain.conditioned[t])


def test_identical_units_get_identical_solutions():
    T = 2
    units = [_stateless(n, T, _pull(2.0), 0.0, 4.0) for n in ("a", "b")]
    vp = validate(ProblemSpec(units, _dirac(T, [4.0]), 1, demand_coordinate=0))
    sols = solve_subproblems(vp, _constant_model(T, -1.0), DadpConfig(control_mesh_size=9))
    for t in range(T + 1):
        assert np.array_equal(sols[0].sweep.conditioned[t], sols[1].sweep.conditioned[t])


# ----------------------------------------------------------- simulate_iterate


def test_simulated_multipliers_satisfy_recursion_exactly():
    T = 4
    rng = np.random.default_rng(11)
    unit = _stateless("plant", T, _pull(1.0), 0.0, 4.0)
    noise = _two_atom(T, [[2.0], [5.0]])
    vp = validate(ProblemSpec([unit], noise, 1, demand_coordinate=0))
    model = PriceModel.from_scalars(
        rng.uniform(-0.5, 0.5, T - 1), rng.uniform(-0.3, 0.3, T), rng.uniform(-1, 1, T)
    )
    sols = solve_subproblems(vp, model, DadpConfig(control_mesh_size=9, lambda_grid_size=9))
    paths = sample_paths(noise, 3, 12)
    rec = simulate_iterate(vp, sols, paths)
    for p, path in enumerate(paths):
        lam = np.empty(T)
        d = path.realizations[:T, 0]
        lam[0] = model.beta[0, 0] * d[0] + model.gamma[0, 0]
        for t in range(1, T):
            lam[t] = model.alpha[t, 0, 0] * lam[t - 1] + model.beta[t, 0] * d[t] + model.gamma[t, 0]
        assert np.array_equal(rec.lambdas[p, :, 0], lam)


def test_zero_model_zero_demand_residuals_are_control_sums():
    T = 3
    units = [_stateless("a", T, _pull(1.0), 0.0, 4.0), _stateless("b", T, _pull(2.0), 0.0, 4.0)]
    vp = validate(ProblemSpec(units, _dirac(T, [0.0]), 1, demand_coordinate=0))
    sols = solve_subproblems(vp, PriceModel.zero(T, 1), DadpConfig(control_mesh_size=5))
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, 2))
    # each unit sits at its own minimum (a mesh node), so the residual is their sum
    assert np.array_equal(rec.controls[0], np.ones((2, T, 1)))
    assert np.array_equal(rec.controls[1], np.full((2, T, 1), 2.0))
    assert np.array_equal(rec.residuals, np.full((2, T, 1), 3.0))
    assert np.array_equal(rec.dual_costs, np.zeros(2))


# ---------------------------------------------------- dual value & gradient


def _record_for_step(lambdas, residuals):
    lambdas = np.asarray(lambdas, dtype=float)
    s, T, d = lambdas.shape
    zeros = np.zeros((s, T, d))
    return SimulationRecord(
        paths=[None] * s,
        demands=np.zeros((s, T)),
        lambdas=lambdas,
        targets=zeros,
        states=[],
        controls=[],
        stage_costs=[],
        terminal_costs=[],
        couplings=[],
        residuals=np.asarray(residuals, dtype=float),
        dual_costs=np.zeros(s),
    )


def test_gradient_step_arithmetic():
    rec = _record_for_step([[[1.0], [1.0]]], [[[2.0], [2.0]]])
    assert np.array_equal(gradient_step(rec, 0.5).lambdas, [[[2.0], [2.0]]])
    assert np.array_equal(gradient_step(rec, 0.0).lambdas, rec.lambdas)
    # per-time steps broadcast down the horizon
    assert np.array_equal(gradient_step(rec, [0.5, 0.0]).lambdas, [[[2.0], [1.0]]])


def test_gradient_step_zero_residual_is_stationary():
    rng = np.random.default_rng(7)
    lam = rng.normal(size=(4, 3, 1))
    rec = _record_for_step(lam, np.zeros_like(lam))
    assert np.array_equal(gradient_step(rec, 0.7).lambdas, lam)


def _desk_instance(T):
    """Deterministic integer-lattice pair used for the enumeration checks:
    a storage unit with linear release cost and a stateless quadratic one."""
    dam = make_unit(
        "dam",
        T,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u + xi[..., 1:2],
        stage_cost=lambda x, u, xi, t: u[..., 0],
        terminal_cost=lambda x: -2.0 * x[..., 0],
        coupling=linear_coupling([1.0]),
        initial_state=[2.0],
        state_bounds=(0.0, 6.0),
        control_bounds=(0.0, 3.0),
    )
    plant = _stateless("plant", T, _pull(1.0), 0.0, 4.0)
    noise = _dirac(T, [3.0, 1.0])
    prob = ProblemSpec([dam, plant], noise, 1, demand_coordinate=0, slack_unit=1)
    cfg = DadpConfig(
        sample_count=2, state_grid_size=7, lambda_grid_size=5, control_mesh_size=[4, 5], seed=0
    )
    return validate(prob), cfg


def _enumerate_dual(vp, lam):
    """Brute-force min of the dualized instance over the mesh lattice."""
    T = vp.T
    best_dam = np.inf
    for u0 in range(4):
        for u1 in range(4):
            x1 = 2.0 - u0 + 1.0
            x2 = x1 - u1 + 1.0
            if not (0.0 <= x1 <= 6.0 and 0.0 <= x2 <= 6.0):
                continue
            best_dam = min(best_dam, (1.0 + lam) * (u0 + u1) - 2.0 * x2)
    per_t = min((u - 1.0) ** 2 + lam * u for u in range(5))
    return best_dam + T * per_t - lam * 3.0 * T


def test_dual_value_zero_model_is_mean_uncoupled_cost():
    vp, cfg = _desk_instance(2)
    sols = solve_subproblems(vp, PriceModel.zero(2, 1), cfg)
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, cfg.sample_count))
    mean, se = dual_value(rec)
    assert mean == _enumerate_dual(vp, 0.0) == -8.0
    assert se == 0.0
    # with no price term the per-path relaxed cost is the plain pathwise cost
    for p, path in enumerate(rec.paths):
        states = [s[p] for s in rec.states]
        controls = [c[p] for c in rec.controls]
        assert np.isclose(pathwise_cost(vp.spec, path, states, controls), rec.dual_costs[p])


def test_dual_value_matches_enumeration_of_dualized_instance():
    vp, cfg = _desk_instance(2)
    lam = -0.75
    sols = solve_subproblems(vp, _constant_model(2, lam), cfg)
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, cfg.sample_count))
    mean, se = dual_value(rec)
    assert mean == _enumerate_dual(vp, lam) == -5.0
    assert se == 0.0


def test_relaxed_cost_separates_across_units():
    """The per-path relaxed cost equals the sum of the units' dualized costs
    minus the priced target, whatever the model."""
    T = 3
    units = [
        _stateless("a", T, _pull(1.0, 0.8), 0.0, 4.0),
        _stateless("b", T, _pull(3.0, 1.3), 0.0, 4.0),
    ]
    noise = _two_atom(T, [[2.0], [5.0]])
    vp = validate(ProblemSpec(units, noise, 1, demand_coordinate=0))
    model = PriceModel.from_scalars(np.full(T - 1, 0.4), np.full(T, -0.2), np.full(T, 0.5))
    sols = solve_subproblems(vp, model, DadpConfig(control_mesh_size=9, lambda_grid_size=9))
    rec = simulate_iterate(vp, sols, sample_paths(noise, 5, 16))
    per_unit = sum(
        rec.stage_costs[i].sum(axis=1)
        + rec.terminal_costs[i]
        + np.sum(rec.lambdas * rec.couplings[i], axis=(1, 2))
        for i in range(2)
    )
    assert np.allclose(rec.dual_costs, per_unit - np.sum(rec.lambdas * rec.targets, axis=(1, 2)), atol=1e-9)


# ------------------------------------------------------------ primal recovery


def test_primal_zero_residual_leaves_slack_untouched():
    T = 2
    units = [_stateless("a", T, _pull(3.0), 0.0, 8.0), _stateless("b", T, _pull(7.0), 0.0, 8.0)]
    vp = validate(ProblemSpec(units, _dirac(T, [10.0]), 1, demand_coordinate=0, slack_unit=1))
    sols = solve_subproblems(vp, PriceModel.zero(T, 1), DadpConfig(control_mesh_size=9))
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, 2))
    assert np.array_equal(rec.residuals, np.zeros((2, T, 1)))
    restored = restore_feasible(vp, rec)
    assert np.array_equal(restored.controls[1], rec.controls[1])
    pr = primal_value(vp, rec)
    assert pr.defined and pr.value == 0.0 and pr.clamp_count == 0
    assert np.array_equal(pr.post_violation_rms, np.zeros(T))


def test_primal_slack_closure_arithmetic():
    # the two committed units bring 4 + 3 = 7 against demand 10, so the
    # slack unit must produce exactly 3 at cost 9 each step
    T = 2
    units = [
        _stateless("a", T, _pull(4.0), 0.0, 8.0),
        _stateless("b", T, _pull(3.0), 0.0, 8.0),
        _stateless("slack", T, lambda x, u, xi, t: u[..., 0] ** 2, 0.0, 10.0),
    ]
    vp = validate(ProblemSpec(units, _dirac(T, [10.0]), 1, demand_coordinate=0, slack_unit=2))
    sols = solve_subproblems(vp, PriceModel.zero(T, 1), DadpConfig(control_mesh_size=[9, 9, 11]))
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, 3))
    assert np.array_equal(rec.residuals, np.full((3, T, 1), -3.0))
    restored = restore_feasible(vp, rec)
    assert np.array_equal(restored.controls[2], np.full((3, T, 1), 3.0))
    pr = primal_value(vp, rec)
    assert pr.defined and pr.value == 9.0 * T and pr.stderr == 0.0
    assert pr.clamp_count == 0
    assert np.array_equal(pr.post_violation_rms, np.zeros(T))


def test_primal_restores_slack_state_rollout():
    """A stateful slack unit is re-rolled along its restored controls."""
    T = 2
    dam = make_unit(
        "slackdam",
        T,
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, xi, t: x - u,
        stage_cost=lambda x, u, xi, t: np.zeros(np.shape(u[..., 0])),
        terminal_cost=lambda x: -1.0 * x[..., 0],
        coupling=linear_coupling([1.0]),
        initial_state=[10.0],
        state_bounds=(0.0, 10.0),
        control_bounds=(0.0, 10.0),
    )
    plant = _stateless("plant", T, _pull(1.0), 0.0, 4.0)
    vp = validate(ProblemSpec([dam, plant], _dirac(T, [4.0]), 1, demand_coordinate=0, slack_unit=0))
    sols = solve_subproblems(
        vp, PriceModel.zero(T, 1), DadpConfig(control_mesh_size=[11, 5], state_grid_size=11)
    )
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, 1))
    restored = restore_feasible(vp, rec)
    # plant keeps u = 1, so the dam covers 3 each step: 10 -> 7 -> 4
    assert np.array_equal(restored.controls[0], [[[3.0], [3.0]]])
    assert np.array_equal(restored.states[0][0, :, 0], [10.0, 7.0, 4.0])
    pr = primal_value(vp, rec)
    assert pr.defined and pr.value == -4.0


def test_primal_clamping_reported_not_hidden():
    T = 2
    units = [
        _stateless("a", T, _pull(4.0), 0.0, 8.0),
        _stateless("b", T, _pull(3.0), 0.0, 8.0),
        _stateless("slack", T, lambda x, u, xi, t: u[..., 0] ** 2, 0.0, 2.0),
    ]
    vp = validate(ProblemSpec(units, _dirac(T, [10.0]), 1, demand_coordinate=0, slack_unit=2))
    sols = solve_subproblems(vp, PriceModel.zero(T, 1), DadpConfig(control_mesh_size=[9, 9, 5]))
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, 1))
    pr = primal_value(vp, rec)
    # the slack needed 3 but its box tops out at 2: one clamp per step,
    # displacement 1, and a residual of -1 left in the restored paths
    assert pr.defined and pr.clamp_count == T and pr.clamp_max == 1.0
    assert np.array_equal(pr.post_violation_rms, np.ones(T))
    assert pr.value == 4.0 * T


def test_primal_undefined_without_slack():
    T = 2
    units = [_stateless("a", T, _pull(3.0), 0.0, 8.0), _stateless("b", T, _pull(2.0), 0.0, 8.0)]
    vp = validate(ProblemSpec(units, _dirac(T, [10.0]), 1, demand_coordinate=0))
    sols = solve_subproblems(vp, PriceModel.zero(T, 1), DadpConfig(control_mesh_size=9))
    rec = simulate_iterate(vp, sols, sample_paths(vp.spec.noise, 0, 2))
    pr = primal_value(vp, rec)
    assert not pr.defined and not pr
    assert np.isnan(pr.value)


# ---------------------------------------------------------------------- run


def _toy_stochastic():
    T = 4
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
    thermal = _stateless("thermal", T, lambda x, u, xi, t: u[..., 0] + 0.5 * u[..., 0] ** 2, 0.0, 8.0)
    noise = _two_atom(T, [[2.0, 0.0], [5.0, 2.0]])
    prob = ProblemSpec([dam, thermal], noise, 1, demand_coordinate=0, slack_unit=1)
    cfg = DadpConfig(
        step_size=0.2,
        sample_count=60,
        stop_tol=1e-4,
        max_iters=5,
        state_grid_size=13,
        lambda_grid_size=9,
        control_mesh_size=[13, 17],
        seed=0,
    )
    return validate(prob), cfg


def test_run_single_iteration_diagnostics():
    vp, cfg = _toy_stochastic()
    cfg = DadpConfig(**{**cfg.__dict__, "max_iters": 1})
    res = run(vp, cfg)
    assert len(res.iterates) == 1 and res.termination == "max-iterations"
    it = res.iterates[0]
    assert it.index == 0 and np.isfinite(it.dual) and np.isfinite(it.primal)
    assert it.violation_rms.shape == (vp.T,)
    assert it.next_model is not None and it.next_model.horizon == vp.T
    assert np.array_equal(it.model.beta, np.zeros((vp.T, 1)))  # evaluated the start model
    assert res.best_index == 0


def test_run_stops_at_equilibrium_fixed_point():
    """Symmetric quadratic pair at its equilibrium price: residuals vanish,
    the refit reproduces the multipliers, and the loop stops on tolerance."""
    T = 3
    units = [
        _stateless("a", T, lambda x, u, xi, t: 0.5 * u[..., 0] ** 2, 0.0, 4.0),
        _stateless("b", T, lambda x, u, xi, t: 0.5 * u[..., 0] ** 2, 0.0, 4.0),
    ]
    vp = validate(ProblemSpec(units, _dirac(T, [4.0]), 1, demand_coordinate=0, slack_unit=1))
    cfg = DadpConfig(step_size=0.3, sample_count=4, stop_tol=1e-6, max_iters=10, control_mesh_size=5)
    res = run(vp, cfg, initial_model=_constant_model(T, -2.0))
    assert res.termination == "tolerance" and len(res.iterates) == 1
    it = res.iterates[0]
    assert np.array_equal(it.violation_rms, np.zeros(T))
    assert it.delta_lambda <= 1e-12
    assert np.isclose(it.dual, it.primal, atol=1e-12)


def test_run_zero_step_freezes_the_model():
    vp, cfg = _toy_stochastic()
    cfg = DadpConfig(**{**cfg.__dict__, "step_size": 0.0, "max_iters": 3, "stop_tol": 1e-9})
    start = _constant_model(vp.T, -1.0)
    res = run(vp, cfg, initial_model=start)
    # targets equal the current multipliers, the refit reproduces them, so
    # the very first movement check passes and the run stops
    assert res.termination == "tolerance" and len(res.iterates) == 1
    it = res.iterates[0]
    demands = np.array([[2.0, 2.0, 5.0, 5.0], [5.0, 2.0, 5.0, 2.0]])
    assert np.allclose(
        propagate_demands(it.next_model, demands), propagate_demands(start, demands), atol=1e-9
    )


def test_run_thread_count_never_changes_results():
    vp, cfg = _toy_stochastic()
    cfg = DadpConfig(**{**cfg.__dict__, "max_iters": 3, "sample_count": 30})
    one = run(vp, cfg, threads=1)
    four = run(vp, cfg, threads=4)
    assert len(one.iterates) == len(four.iterates)
    for a, b in zip(one.iterates, four.iterates):
        assert a.dual == b.dual and a.primal == b.primal
        assert a.delta_lambda == b.delta_lambda
        assert np.array_equal(a.next_model.beta, b.next_model.beta)
        assert np.array_equal(a.next_model.gamma, b.next_model.gamma)


def test_run_iterates_respect_weak_duality():
    vp, cfg = _toy_stochastic()
    res = run(vp, cfg)
    assert len(res.iterates) >= 2
    for it in res.iterates:
        if np.isfinite(it.primal):
            slack = 3.0 * np.hypot(it.dual_stderr, it.primal_stderr)
            assert it.dual <= it.primal + slack + 1e-9


def test_step_vector_validation():
    with pytest.raises(DadpError, match="scalar or length"):
        DadpConfig(step_size=[0.1, 0.2]).step_vector(3)
    with pytest.raises(DadpError, match="nonnegative"):
        DadpConfig(step_size=-0.1).step_vector(3)


def test_iteration_seed_is_stable_and_spread():
    seeds = [iteration_seed(7, k) for k in range(6)]
    assert seeds == [iteration_seed(7, k) for k in range(6)]
    assert len(set(seeds)) == 6
    assert iteration_seed(8, 0) != iteration_seed(7, 0)


# ----------------------------------------------- against the quadratic oracle


def _tree_paths(tree):
    """Every root-to-leaf branch of a scenario tree as a NoisePath."""
    seqs = [[0]]
    for t in range(1, len(tree.parent)):
        seqs = [
            s + [idx]
            for s in seqs
            for idx in range(len(tree.parent[t]))
            if int(tree.parent[t][idx]) == s[-1]
        ]
    paths = []
    for seq in seqs:
        reals = np.stack([tree.xi[t][seq[t]] for t in range(len(seq))])
        atoms = np.array([int(tree.atom[t][seq[t]]) if t else 0 for t in range(len(seq))])
        paths.append(NoisePath(realizations=reals, atom_indices=atoms, seed=0))
    return seqs, paths


def test_quadratic_warm_start_reproduces_kkt_solution():
    """On the alpha = 0 family the warm-started subproblems replay the
    KKT-optimal controls (to mesh resolution) and multipliers (negated:
    the decomposition prices with the opposite orientation)."""
    T = 3
    demand_atoms = [[4.0], [3.0, 5.0], [3.0, 5.0], [4.0]]
    demand_weights = [[1.0], [0.5, 0.5], [0.5, 0.5], [1.0]]
    inflow_atoms = [[[0.5]] * (T + 1), [[0.2]] * (T + 1)]
    inflow_weights = [[[1.0]] * (T + 1), [[1.0]] * (T + 1)]
    noise = independent_noise(demand_atoms, demand_weights, inflow_atoms, inflow_weights)
    spec = QuadraticSpec(np.array([1.0, 2.0]), np.zeros(2), np.array([10.0, 10.0]), noise)
    tree = ScenarioTree.build(noise, 0)
    kkt = kkt_solve(spec, tree)

    vp = validate(to_problem(spec))
    model = warm_start(spec)
    cfg = DadpConfig(
        sample_count=8, max_iters=1, lambda_grid_size=21, state_grid_size=41,
        control_mesh_size=41, seed=0,
    )
    sols = solve_subproblems(vp, model, cfg)
    seqs, paths = _tree_paths(tree)
    rec = simulate_iterate(vp, sols, paths)

    spacing = [
        float(vp.spec.subsystems[i].control_upper[0][0] - vp.spec.subsystems[i].control_lower[0][0])
        / (cfg.control_mesh_size - 1)
        for i in range(2)
    ]
    for p, seq in enumerate(seqs):
        for t in range(T):
            assert abs(rec.lambdas[p, t, 0] + kkt.multipliers[t][seq[t]]) <= 1e-9
            for i in range(2):
                dev = abs(rec.controls[i][p, t, 0] - kkt.controls[t][seq[t], i])
                assert dev <= spacing[i] + 1e-9

"""Price decomposition with parameterized multiplier dynamics.

The coupled problem is relaxed by a multiplier process restricted to the
autoregressive family of :mod:`dadp.prices`.  Each unit then faces an
independent subproblem whose state is (own state, current multiplier): the
multiplier recursion rides along as extra deterministic-given-noise
dynamics, so plain backward induction applies per unit.  One coordination
iteration is

    1. solve the N augmented subproblems by backward induction,
    2. simulate all units along common sampled noise paths,
    3. take a sample-wise gradient step on the multipliers
       (lambda + rho * coupling residual),
    4. project the stepped samples back onto the family by regression,

and the loop stops when the sampled multiplier process moves less than a
tolerance in RMS.  The dual value is estimated from the simulated paths;
a primal (feasible) value is recovered by re-closing the coupling through
the declared slack unit with clamping to its bounds.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (
    DadpError,
    NoiseModel,
    ProblemSpec,
    SubsystemSpec,
    ValidatedProblem,
    sample_paths,
    validate,
)
from .dp import SolverError, SweepSolution, ControlMesh, _Stage, _eval_stage, backward_sweep, regular_state_grids
from .prices import (
    PriceModel,
    PricePathSamples,
    RegressionResult,
    propagate_demands,
    regress,
    support_range,
)

__all__ = [
    "DadpConfig",
    "Subproblem",
    "UnitSolution",
    "SimulationRecord",
    "PrimalResult",
    "DadpIterate",
    "DadpResult",
    "build_subproblem",
    "solve_subproblems",
    "simulate_iterate",
    "gradient_step",
    "dual_value",
    "primal_value",
    "iteration_seed",
    "run",
]


@dataclass
class DadpConfig:
    """Knobs of the coordination loop.

    ``step_size`` (rho) may be a scalar or a per-time sequence of length T.
    Grid knobs: ``state_grid_size`` nodes per own-state dimension (scalar or
    per-unit list), ``lambda_grid_size`` nodes per multiplier dimension,
    ``control_mesh_size`` candidates per control dimension (scalar or
    per-unit).  ``lambda_margin`` widens the reachable multiplier hull on
    both sides by that fraction of its width before gridding.
    """

    step_size: object = 1.0
    sample_count: int = 1000
    stop_tol: float = 1e-3
    max_iters: int = 100
    lambda_grid_size: int = 21
    lambda_margin: float = 0.1
    state_grid_size: object = 51
    control_mesh_size: object = 13
    seed: int = 0

    def step_vector(self, horizon):
        step = np.asarray(self.step_size, dtype=float)
        if step.ndim == 0:
            step = np.full(horizon, float(step))
        if step.shape != (horizon,):
            raise DadpError(f"step_size must be scalar or length-{horizon}, got shape {step.shape}")
        if np.any(step < 0):
            raise DadpError("step sizes must be nonnegative")
        return step


def _per_unit(value, n_units):
    if np.isscalar(value):
        return [value] * n_units
    value = list(value)
    if len(value) != n_units:
        raise DadpError(f"expected a scalar or one entry per unit ({n_units}), got {len(value)}")
    return value


# ---------------------------------------------------------------------------
# Subproblems: one unit plus the multiplier process as extra state


@dataclass
class Subproblem:
    """A single unit with the multiplier carried as extra state."""

    unit_index: int
    vp: ValidatedProblem        # one augmented pseudo-unit, no coupling
    base_unit: SubsystemSpec
    model: PriceModel
    lambda_lo: np.ndarray       # (T, d) padded reachable hull
    lambda_hi: np.ndarray


@dataclass
class UnitSolution:
    sub: Subproblem
    sweep: SweepSolution


def build_subproblem(vp: ValidatedProblem, unit_index, model: PriceModel, *, margin=0.1):
    """Augment one unit with the multiplier recursion as extra state.

    The pseudo-unit's state is (x_i, lambda_t); its stage cost adds the
    price term lambda_t . g_i(x_i, u_i); its dynamics propagate lambda with
    the next observed demand (the last step carries lambda unchanged, the
    terminal cost ignores it).  Multiplier bounds are the exact reachable
    interval hull widened by ``margin``.
    """
    spec = vp.spec
    T = vp.T
    dc = spec.demand_coordinate
    if dc is None:
        raise DadpError("price decomposition needs a demand_coordinate to drive the multiplier model")
    d = spec.coupling_dim
    if model.horizon != T or model.dim != d:
        raise DadpError(
            f"price model shape ({model.horizon}, {model.dim}) does not match "
            f"problem ({T}, {d})"
        )
    unit = spec.subsystems[unit_index]
    n = unit.state_dim
    lam_lo, lam_hi = support_range(model, spec.noise, dc, margin)
    alpha, beta, gamma = model.alpha, model.beta, model.gamma

    def dyn(x, u, xi, t):
        xs = x[..., :n]
        lam = x[..., n:]
        if t + 1 < T:
            dem = np.asarray(xi, dtype=float)[..., dc : dc + 1]
            lam_next = lam @ alpha[t + 1].T + beta[t + 1] * dem + gamma[t + 1]
        else:
            lam_next = lam
        if n == 0:
            return lam_next
        xs_next = np.asarray(unit.dynamics(xs, u, xi, t), dtype=float)
        lead = np.broadcast_shapes(xs_next.shape[:-1], lam_next.shape[:-1])
        return np.concatenate(
            [np.broadcast_to(xs_next, lead + (n,)), np.broadcast_to(lam_next, lead + (d,))],
            axis=-1,
        )

    def cost(x, u, xi, t):
        xs = x[..., :n]
        lam = x[..., n:]
        L = np.asarray(unit.stage_cost(xs, u, xi, t), dtype=float)
        g = np.asarray(unit.coupling(xs, u, t), dtype=float)
        return L + np.sum(lam * g, axis=-1)

    def term(x):
        return unit.terminal_values(x[..., :n])

    state_lower = np.empty((T + 1, n + d))
    state_upper = np.empty((T + 1, n + d))
    for t in range(T + 1):
        th = min(t, T - 1)  # lambda_T is carried equal to lambda_{T-1}
        state_lower[t] = np.concatenate([unit.state_lower[t], lam_lo[th]])
        state_upper[t] = np.concatenate([unit.state_upper[t], lam_hi[th]])
    x0 = np.concatenate([unit.initial_state, 0.5 * (lam_lo[0] + lam_hi[0])])
    coords = None if unit.noise_coords is None else tuple(sorted(set(unit.noise_coords) | {dc}))

    aug = SubsystemSpec(
        name=f"{unit.name}+price",
        state_dim=n + d,
        control_dim=unit.control_dim,
        stage_cost=cost,
        dynamics=dyn,
        terminal_cost=term,
        coupling=lambda x, u, t: np.zeros(np.shape(u)[:-1] + (d,)),
        initial_state=x0,
        state_lower=state_lower,
        state_upper=state_upper,
        control_lower=unit.control_lower,
        control_upper=unit.control_upper,
        noise_coords=coords,
    )
    pseudo = ProblemSpec(
        subsystems=(aug,),
        noise=spec.noise,
        coupling_dim=d,
        demand_coordinate=dc,
        coupling_target=spec.coupling_target,
        slack_unit=None,
        name=f"{spec.name or 'problem'}::{unit.name}",
    )
    return Subproblem(
        unit_index=unit_index,
        vp=validate(pseudo),
        base_unit=unit,
        model=model,
        lambda_lo=lam_lo,
        lambda_hi=lam_hi,
    )


def _solve_one(vp, unit_index, model, config):
    n_units = vp.n_units
    state_nums = _per_unit(config.state_grid_size, n_units)
    mesh_nums = _per_unit(config.control_mesh_size, n_units)
    sub = build_subproblem(vp, unit_index, model, margin=config.lambda_margin)
    unit = sub.base_unit
    d = vp.spec.coupling_dim
    num = list(np.broadcast_to(np.asarray(state_nums[unit_index], dtype=int), (unit.state_dim,)))
    num += [config.lambda_grid_size] * d
    grids = regular_state_grids(sub.vp, num)
    mesh = ControlMesh.uniform(sub.vp, [mesh_nums[unit_index]])
    sweep = backward_sweep(sub.vp, grids, mesh, coupled=False)
    return UnitSolution(sub=sub, sweep=sweep)


def solve_subproblems(vp: ValidatedProblem, model: PriceModel, config: DadpConfig, *, threads=1):
    """Solve every unit's augmented subproblem; independent across units, so
    thread count never changes the result."""
    if threads <= 1 or vp.n_units == 1:
        return [_solve_one(vp, i, model, config) for i in range(vp.n_units)]
    with ThreadPoolExecutor(max_workers=min(threads, vp.n_units)) as pool:
        futs = [pool.submit(_solve_one, vp, i, model, config) for i in range(vp.n_units)]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class SimulationRecord:
    """Everything one coordination iteration's simulation produced.

    Per-unit lists are indexed like the problem's subsystems: ``states[i]``
    is (s, T+1, n_i), ``controls[i]`` (s, T, m_i), ``stage_costs[i]``
    (s, T), ``couplings[i]`` (s, T, d).  ``lambdas`` is (s, T, d),
    ``residuals`` (s, T, d) the signed coupling violation, ``dual_costs``
    (s,) the per-path value of the relaxed objective.
    """

    paths: list
    demands: np.ndarray
    lambdas: np.ndarray
    targets: np.ndarray
    states: list
    controls: list
    stage_costs: list
    terminal_costs: list
    couplings: list
    residuals: np.ndarray
    dual_costs: np.ndarray

    @property
    def sample_count(self):
        return len(self.paths)

    def violation_rms(self):
        """(T,) RMS over samples of the coupling residual norm (per root
        coupling dimension, so scalar couplings read directly)."""
        d = self.residuals.shape[2]
        return np.sqrt(np.mean(np.sum(self.residuals**2, axis=2) / d, axis=0))


def simulate_iterate(vp: ValidatedProblem, solutions, paths):
    """Greedy forward simulation of every unit along common noise paths.

    Controls minimize current cost plus the stored next conditioned value at
    the *exact* augmented state (no state-grid projection on the way
    forward).  Raises if any path reaches a state with no admissible
    candidate, naming the unit, path and time step.
    """
    spec = vp.spec
    T = vp.T
    dc = spec.demand_coordinate
    s = len(paths)
    if s < 1:
        raise DadpError("simulation needs at least one path")
    model = solutions[0].sub.model
    xi_all = np.stack([p.realizations for p in paths])  # (s, T+1, p)
    demands = xi_all[:, :T, dc]
    lambdas = propagate_demands(model, demands)  # (s, T, d)
    d = spec.coupling_dim

    targets = np.empty((s, T, d))
    for t in range(T):
        targets[:, t] = spec.target_values(xi_all[:, t, :], t)

    states, controls, stage_costs, terminal_costs, couplings = [], [], [], [], []
    g_sum = np.zeros((s, T, d))
    for sol in solutions:
        unit = sol.sub.base_unit
        i = sol.sub.unit_index
        n_i, m_i = unit.state_dim, unit.control_dim
        X = np.tile(unit.initial_state, (s, 1))
        xs = np.empty((s, T + 1, n_i))
        us = np.empty((s, T, m_i))
        ls = np.empty((s, T))
        gs = np.empty((s, T, d))
        xs[:, 0] = X
        for t in range(T):
            x_aug = np.concatenate([X, lambdas[:, t, :]], axis=1)
            stage = _Stage(sol.sub.vp, t, sol.sweep.grids, sol.sweep.mesh, False, None)
            values, ctrl = _eval_stage(stage, x_aug, sol.sweep.conditioned[t + 1])
            bad = ~np.isfinite(values[0])
            if np.any(bad):
                sigma = int(np.argmax(bad))
                raise SolverError(
                    f"simulation found no admissible control for unit {unit.name!r} "
                    f"on path {sigma} at t={t} (state {X[sigma]}, "
                    f"multiplier {lambdas[sigma, t]})"
                )
            u = ctrl[0]
            xi_next = xi_all[:, t + 1, :]
            ls[:, t] = np.asarray(unit.stage_cost(X, u, xi_next, t), dtype=float)
            gs[:, t] = np.asarray(unit.coupling(X, u, t), dtype=float).reshape(s, d)
            if n_i:
                X = np.asarray(unit.dynamics(X, u, xi_next, t), dtype=float).reshape(s, n_i)
            xs[:, t + 1] = X
            us[:, t] = u
        states.append(xs)
        controls.append(us)
        stage_costs.append(ls)
        terminal_costs.append(np.asarray(unit.terminal_values(X), dtype=float).reshape(s))
        couplings.append(gs)
        g_sum += gs

    residuals = g_sum - targets
    dual_costs = (
        sum(ls.sum(axis=1) for ls in stage_costs)
        + sum(tc for tc in terminal_costs)
        + np.sum(lambdas * residuals, axis=(1, 2))
    )
    return SimulationRecord(
        paths=list(paths),
        demands=demands,
        lambdas=lambdas,
        targets=targets,
        states=states,
        controls=controls,
        stage_costs=stage_costs,
        terminal_costs=terminal_costs,
        couplings=couplings,
        residuals=residuals,
        dual_costs=dual_costs,
    )


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    m = float(np.mean(values))
    if len(values) < 2:
        return m, 0.0
    return m, float(np.std(values, ddof=1) / np.sqrt(len(values)))


def dual_value(record: SimulationRecord):
    """Monte-Carlo estimate (mean, standard error) of the relaxed objective
    at the current multiplier model."""
    return _mean_se(record.dual_costs)


def gradient_step(record: SimulationRecord, step):
    """Sample-wise multiplier update lambda + rho * residual.

    ``step`` is a scalar, a (T,) sequence, or a (T, d) array.  Returns the
    stepped samples ready for regression.
    """
    step = np.asarray(step, dtype=float)
    if step.ndim == 1:
        step = step[:, None]
    targets = record.lambdas + step * record.residuals
    return PricePathSamples(lambdas=targets, demands=record.demands, paths=record.paths)


# ---------------------------------------------------------------------------
# Primal recovery


@dataclass
class PrimalResult:
    """Feasible-cost estimate after re-closing the coupling through the
    slack unit.  ``defined`` is False when no slack unit exists and the
    simulated paths are not already feasible."""

    defined: bool
    value: float
    stderr: float
    clamp_count: int          # (path, t) events where bounds displaced the slack control
    clamp_max: float          # largest control displacement
    state_clip_count: int     # slack-state box projections during restoration
    post_violation_rms: np.ndarray  # (T,) residual RMS after restoration

    def __bool__(self):
        return self.defined


@dataclass
class RestoredTrajectories:
    """Pathwise-feasible trajectories after re-closing the coupling.

    Per-unit arrays are indexed like the record's; only the slack unit's
    entries differ from the simulation.  ``defined`` is False when no slack
    unit exists and the simulated paths are not already feasible (the
    originals are passed through unchanged in that case).
    """

    defined: bool
    controls: list
    states: list
    stage_costs: list
    terminal_costs: list
    residuals: np.ndarray       # (s, T, d) after restoration
    clamp_count: int
    clamp_max: float
    state_clip_count: int

    def total_costs(self):
        return sum(ls.sum(axis=1) for ls in self.stage_costs) + sum(self.terminal_costs)


def restore_feasible(vp: ValidatedProblem, record: SimulationRecord, *, feas_tol=1e-7):
    """Re-solve the slack unit's control pathwise so the coupling holds.

    The slack control is chosen each step to close the constraint exactly
    given every other unit's simulated decisions, then clamped to its
    bounds (clamping events are counted and the residual they leave is
    reported); a stateful slack is re-rolled and projected into its state
    box.  Without a slack unit the trajectories are returned as-is, marked
    undefined unless already feasible to ``feas_tol``.
    """
    spec = vp.spec
    T = vp.T
    s = record.sample_count
    slack = spec.slack_unit
    if slack is None:
        worst = float(np.max(np.abs(record.residuals))) if record.residuals.size else 0.0
        return RestoredTrajectories(
            defined=worst <= feas_tol,
            controls=list(record.controls),
            states=list(record.states),
            stage_costs=list(record.stage_costs),
            terminal_costs=list(record.terminal_costs),
            residuals=record.residuals,
            clamp_count=0,
            clamp_max=0.0,
            state_clip_count=0,
        )

    s_unit = spec.subsystems[slack]
    d = spec.coupling_dim
    m_s = s_unit.control_dim
    if m_s != d:
        raise SolverError(
            f"slack unit {s_unit.name!r} needs control_dim == coupling_dim for restoration"
        )
    others = sum(record.couplings[i] for i in range(vp.n_units) if i != slack)  # (s,T,d)
    xi_all = np.stack([p.realizations for p in record.paths])
    x_s = np.tile(s_unit.initial_state, (s, 1))
    slack_states = np.empty((s, T + 1, s_unit.state_dim))
    slack_states[:, 0] = x_s
    slack_controls = np.empty((s, T, m_s))
    slack_costs = np.empty((s, T))
    clamp_count = 0
    clamp_max = 0.0
    clip_count = 0
    post = np.empty((s, T, d))
    for t in range(T):
        u0 = s_unit.control_lower[t]
        g0 = np.asarray(s_unit.coupling(x_s, np.broadcast_to(u0, (s, m_s)), t), dtype=float)
        cols = np.empty((s, d, m_s))
        for j in range(m_s):
            up = u0.copy()
            up[j] += 1.0
            cols[:, :, j] = (
                np.asarray(s_unit.coupling(x_s, np.broadcast_to(up, (s, m_s)), t), dtype=float)
                - g0
            )
        rhs = record.targets[:, t] - others[:, t] - g0
        if d == 1:
            denom = cols[:, 0, 0]
            if np.any(np.abs(denom) < 1e-12):
                raise SolverError(f"slack restoration singular at t={t}")
            u_free = u0[None, :] + rhs / denom[:, None]
        else:
            try:
                u_free = u0[None, :] + np.linalg.solve(cols, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError as e:
                raise SolverError(f"slack restoration singular at t={t}") from e
        u_cl = np.clip(u_free, s_unit.control_lower[t], s_unit.control_upper[t])
        disp = np.max(np.abs(u_free - u_cl), axis=1)
        clamped = disp > 1e-12
        clamp_count += int(np.count_nonzero(clamped))
        if np.any(clamped):
            clamp_max = max(clamp_max, float(disp.max()))
        g_new = np.asarray(s_unit.coupling(x_s, u_cl, t), dtype=float)
        post[:, t] = g_new + others[:, t] - record.targets[:, t]
        xi_next = xi_all[:, t + 1, :]
        slack_controls[:, t] = u_cl
        slack_costs[:, t] = np.asarray(s_unit.stage_cost(x_s, u_cl, xi_next, t), dtype=float)
        if s_unit.state_dim:
            x_s = np.asarray(s_unit.dynamics(x_s, u_cl, xi_next, t), dtype=float)
            lo, hi = s_unit.state_lower[t + 1], s_unit.state_upper[t + 1]
            x_clip = np.clip(x_s, lo, hi)
            clip_count += int(np.count_nonzero(np.any(np.abs(x_clip - x_s) > 1e-12, axis=1)))
            x_s = x_clip
        slack_states[:, t + 1] = x_s
    if s_unit.state_dim:
        slack_terminal = np.asarray(s_unit.terminal_values(x_s), dtype=float).reshape(s)
    else:
        slack_terminal = record.terminal_costs[slack]
    controls = list(record.controls)
    states = list(record.states)
    stage_costs = list(record.stage_costs)
    terminal_costs = list(record.terminal_costs)
    controls[slack] = slack_controls
    states[slack] = slack_states
    stage_costs[slack] = slack_costs
    terminal_costs[slack] = slack_terminal
    return RestoredTrajectories(
        defined=True,
        controls=controls,
        states=states,
        stage_costs=stage_costs,
        terminal_costs=terminal_costs,
        residuals=post,
        clamp_count=clamp_count,
        clamp_max=clamp_max,
        state_clip_count=clip_count,
    )


def primal_value(vp: ValidatedProblem, record: SimulationRecord, *, feas_tol=1e-7):
    """Feasible-cost estimate: restore the coupling pathwise, price it."""
    restored = restore_feasible(vp, record, feas_tol=feas_tol)
    d = vp.spec.coupling_dim
    rms = np.sqrt(np.mean(np.sum(restored.residuals**2, axis=2) / d, axis=0))
    if not restored.defined:
        return PrimalResult(
            False, float("nan"), float("nan"),
            restored.clamp_count, restored.clamp_max, restored.state_clip_count, rms,
        )
    m, se = _mean_se(restored.total_costs())
    return PrimalResult(
        True, m, se, restored.clamp_count, restored.clamp_max, restored.state_clip_count, rms,
    )


# ---------------------------------------------------------------------------
# The coordination loop


@dataclass
class DadpIterate:
    """Diagnostics of one coordination iteration (at the model it evaluated)."""

    index: int
    model: PriceModel
    dual: float
    dual_stderr: float
    primal: float               # NaN when undefined
    primal_stderr: float
    violation_rms: np.ndarray   # (T,)
    delta_lambda: float         # RMS multiplier movement after re-projection
    regression_residual: float
    rank_deficient: list = field(default_factory=list)
    clamp_count: int = 0
    wall_seconds: float = 0.0
    next_model: PriceModel | None = None    # fitted model handed to iterate k+1

    @property
    def gap(self):
        return self.primal - self.dual


@dataclass
class DadpResult:
    iterates: list
    model: PriceModel           # final fitted model (one step past the last iterate)
    solutions: list             # unit solutions for the last *evaluated* model
    termination: str            # "tolerance" | "max-iterations" | "aborted-non-finite"
    best_index: int

    @property
    def best(self):
        return self.iterates[self.best_index]

    @property
    def final(self):
        return self.iterates[-1]


def iteration_seed(base_seed, iteration):
    """Stable per-iteration path seed; depends only on (base_seed, k), so a
    resumed run draws exactly the paths the uninterrupted run would."""
    from numpy.random import SeedSequence

    ss = SeedSequence([int(base_seed), int(iteration)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run(
    vp: ValidatedProblem,
    config: DadpConfig,
    *,
    initial_model: PriceModel | None = None,
    threads: int = 1,
    callback=None,
    start_iteration: int = 0,
):
    """Run the coordination loop until the multiplier process settles.

    Per iteration: fresh common paths (seeded from ``(config.seed, k)``),
    subproblem sweeps, greedy simulation, gradient step, regression.  Stops
    when the RMS movement of the sampled multipliers falls below
    ``stop_tol``, the global iteration cap ``max_iters`` is reached, or a
    non-finite diagnostic appears (the history is preserved either way).
    ``callback(iterate)`` runs after each iteration (checkpointing hooks in
    here).  ``start_iteration`` resumes the schedule mid-way: pass the
    fitted model from the last completed iterate and its index + 1.
    """
    if not isinstance(vp, ValidatedProblem):
        vp = validate(vp)
    spec = vp.spec
    T = vp.T
    d = spec.coupling_dim
    if config.seed < 0:
        raise DadpError("seed must be non-negative")
    step = config.step_vector(T)
    model = initial_model if initial_model is not None else PriceModel.zero(T, d)
    iterates = []
    solutions = []
    termination = "max-iterations"
    for k in range(start_iteration, config.max_iters):
        tic = time.perf_counter()
        solutions = solve_subproblems(vp, model, config, threads=threads)
        paths = sample_paths(spec.noise, iteration_seed(config.seed, k), config.sample_count)
        record = simulate_iterate(vp, solutions, paths)
        dual, dual_se = dual_value(record)
        pr = primal_value(vp, record)
        targets = gradient_step(record, step)
        reg = regress(targets)
        new_lam = propagate_demands(reg.model, record.demands)
        delta = float(np.sqrt(np.mean((new_lam - record.lambdas) ** 2)))
        it = DadpIterate(
            index=k,
            model=model,
            dual=dual,
            dual_stderr=dual_se,
            primal=pr.value if pr.defined else float("nan"),
            primal_stderr=pr.stderr if pr.defined else float("nan"),
            violation_rms=record.violation_rms(),
            delta_lambda=delta,
            regression_residual=reg.residual,
            rank_deficient=reg.rank_deficient,
            clamp_count=pr.clamp_count,
            wall_seconds=time.perf_counter() - tic,
            next_model=reg.model,
        )
        iterates.append(it)
        if callback is not None:
            callback(it)
        if not (np.isfinite(dual) and np.isfinite(delta)):
            termination = "aborted-non-finite"
            break
        model = reg.model
        if delta < config.stop_tol:
            termination = "tolerance"
            break
    if not iterates:
        raise DadpError("no iterations ran; check max_iters vs start_iteration")
    duals = np.array([it.dual for it in iterates])
    finite = np.isfinite(duals)
    best = int(np.argmax(np.where(finite, duals, -np.inf))) if np.any(finite) else len(iterates) - 1
    return DadpResult(
        iterates=iterates,
        model=model,
        solutions=solutions,
        termination=termination,
        best_index=best,
    )

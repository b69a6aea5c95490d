"""Quadratic demand-splitting instance with known multiplier dynamics.

The instance: N storage units with dynamics x_{t+1} = x_t - u_t + a_{t+1},
cost sum_t (c_i/2) u_t^2 + (gamma_i/2)(x_T - x_0)^2, coupled by
sum_i u_t^i = d_t almost surely, no box constraints.  When the terminal
weights are proportional to the control costs (gamma_i = alpha * c_i, one
common alpha >= 0), the optimal multipliers follow a recursion driven only
by the noise:

    lambda_{t+1} = lambda_t + (1/C) [ d_{t+1} (1+alpha) - d_t
                    - alpha E[d_{t+1}] - alpha (a_{t+1} - E[a_{t+1}]) ]
    lambda_0     = (1/C) [ d_0 (1+alpha) + alpha sum_{s=1}^{T-1} E[d_s]
                    - alpha sum_{s=1}^{T} E[a_s] ]

with C = sum_i 1/c_i and a_t the total inflow.  (The genesis term follows
from stationarity c_i u_t^i - gamma_i E[x_T^i - x_0^i | F_t] = lambda_t
summed over units; sanity check N=1, constant demand delta, no inflow:
the increment vanishes and lambda_0 = c delta (1 + alpha T), which matches
the direct computation.)  d_0 is treated as observed before u_0, so all
values here are conditional on the root realization.

An exact KKT solver over a scenario tree provides ground truth: the
multiplier reported at node n is lambda_n = -mu_n / p_n where mu_n is the
raw equality multiplier of the probability-weighted program, which makes
lambda_n = c_i u_n^i at alpha = 0 (the myopic marginal price d_n / C).

Noise layout: xi_t = (d_t, a_t^1, ..., a_t^N), so the demand is coordinate
0 and unit i's inflow is coordinate 1 + i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ioutil import fmt, write_rows
from .model import DadpError, NoiseModel, NoisePath, ProblemSpec, make_unit, linear_coupling
from .prices import PriceModel, PricePathSamples, regress

__all__ = [
    "HypothesisError",
    "QuadraticSpec",
    "ScenarioTree",
    "QuadraticSolution",
    "VerificationReport",
    "independent_noise",
    "closed_form_lambda",
    "closed_form_on_tree",
    "kkt_solve",
    "verify_proposition",
    "warm_start",
    "to_problem",
]

KKT_VARIABLE_CAP = 5000


class HypothesisError(DadpError):
    """The proportionality hypothesis gamma_i = alpha * c_i fails."""


@dataclass(frozen=True)
class QuadraticSpec:
    """Data of the quadratic instance.

    ``noise`` must have dimension 1 + N (demand first, one inflow per
    unit).  Construction checks shapes and positivity only; the
    proportionality hypothesis is checked where it is needed, so
    non-conforming specs can exist to exercise the guard paths.
    """

    costs: np.ndarray            # c_i > 0
    terminal_weights: np.ndarray  # gamma_i >= 0
    initial_states: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=float).reshape(-1)
        g = np.asarray(self.terminal_weights, dtype=float).reshape(len(c))
        x0 = np.asarray(self.initial_states, dtype=float).reshape(len(c))
        if np.any(c <= 0):
            raise DadpError("unit costs must be positive")
        if np.any(g < 0):
            raise DadpError("terminal weights must be nonnegative")
        if self.noise.dim != 1 + len(c):
            raise DadpError(
                f"noise dimension {self.noise.dim} != 1 + N = {1 + len(c)} "
                "(demand plus one inflow per unit)"
            )
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "terminal_weights", g)
        object.__setattr__(self, "initial_states", x0)

    @property
    def n_units(self):
        return len(self.costs)

    @property
    def horizon(self):
        return self.noise.horizon

    @property
    def inverse_cost_sum(self):
        return float(np.sum(1.0 / self.costs))

    def alpha(self, tol=1e-9):
        """The common ratio gamma_i / c_i; raises when there is none."""
        ratios = self.terminal_weights / self.costs
        spread = float(ratios.max() - ratios.min())
        if spread > tol * max(1.0, float(np.abs(ratios).max())):
            raise HypothesisError(
                "terminal weights are not proportional to control costs: "
                f"gamma/c ranges over [{ratios.min():.6g}, {ratios.max():.6g}]"
            )
        return float(ratios.mean())

    def demand_mean(self, t):
        a = self.noise.atoms[t][:, 0]
        return float(a @ self.noise.weights[t])

    def total_inflow_mean(self, t):
        a = self.noise.atoms[t][:, 1:].sum(axis=1)
        return float(a @ self.noise.weights[t])


def independent_noise(demand_atoms, demand_weights, inflow_atoms, inflow_weights):
    """Joint per-t supports from independent demand and per-unit inflows.

    ``demand_atoms[t]`` lists demand values, ``inflow_atoms[i][t]`` unit i's
    inflow values; the within-step joint support is their product.  All
    lists cover t = 0..T.
    """
    T = len(demand_atoms) - 1
    n = len(inflow_atoms)
    atoms, weights = [], []
    for t in range(T + 1):
        axes = [np.asarray(demand_atoms[t], dtype=float)]
        waxes = [np.asarray(demand_weights[t], dtype=float)]
        for i in range(n):
            axes.append(np.asarray(inflow_atoms[i][t], dtype=float))
            waxes.append(np.asarray(inflow_weights[i][t], dtype=float))
        grids = np.meshgrid(*axes, indexing="ij")
        atoms.append(np.stack([g.ravel() for g in grids], axis=-1))
        wg = np.meshgrid(*waxes, indexing="ij")
        weights.append(np.prod(np.stack([w.ravel() for w in wg], axis=-1), axis=1))
    return NoiseModel.from_lists(T, atoms, weights)


# ---------------------------------------------------------------------------
# Closed-form multipliers


def closed_form_lambda(spec: QuadraticSpec, path):
    """Multiplier trajectory lambda_0..lambda_{T-1} along one noise path."""
    alpha = spec.alpha()
    T = spec.horizon
    xi = path.realizations if isinstance(path, NoisePath) else np.asarray(path, dtype=float)
    if xi.shape != (T + 1, 1 + spec.n_units):
        raise DadpError(f"path shape {xi.shape} != ({T + 1}, {1 + spec.n_units})")
    C = spec.inverse_cost_sum
    lam = np.empty(T)
    lam[0] = (
        xi[0, 0] * (1 + alpha)
        + alpha * sum(spec.demand_mean(s) for s in range(1, T))
        - alpha * sum(spec.total_inflow_mean(s) for s in range(1, T + 1))
    ) / C
    for t in range(T - 1):
        d_next = xi[t + 1, 0]
        a_next = float(xi[t + 1, 1:].sum())
        lam[t + 1] = lam[t] + (
            d_next * (1 + alpha)
            - xi[t, 0]
            - alpha * spec.demand_mean(t + 1)
            - alpha * (a_next - spec.total_inflow_mean(t + 1))
        ) / C
    return lam


# ---------------------------------------------------------------------------
# Scenario tree


@dataclass
class ScenarioTree:
    """Product tree over the finite noise supports.

    Level t holds one node per realized history of (xi_1..xi_t); the root
    carries the observed xi_0 (everything downstream is conditional on it).
    Zero-probability atoms are dropped.  Per level: ``parent`` indexes into
    the previous level, ``atom`` the time-t support, ``prob`` the path
    probability (root = 1), ``xi`` the node's realization.
    """

    noise: NoiseModel
    root_atom: int
    parent: list      # per level, (n_t,) int (level 0: [-1])
    atom: list        # per level, (n_t,) int
    prob: list        # per level, (n_t,) float
    xi: list          # per level, (n_t, p)

    @classmethod
    def build(cls, noise: NoiseModel, root_atom=0):
        T = noise.horizon
        if not 0 <= root_atom < len(noise.atoms[0]):
            raise DadpError(f"root_atom {root_atom} outside the t=0 support")
        parent = [np.array([-1])]
        atom = [np.array([root_atom])]
        prob = [np.ones(1)]
        xi = [noise.atoms[0][[root_atom]]]
        for t in range(1, T + 1):
            w = np.asarray(noise.weights[t], dtype=float)
            keep = np.nonzero(w > 0)[0]
            n_prev = len(prob[t - 1])
            parent.append(np.repeat(np.arange(n_prev), len(keep)))
            atom.append(np.tile(keep, n_prev))
            prob.append(np.repeat(prob[t - 1], len(keep)) * np.tile(w[keep], n_prev))
            xi.append(np.asarray(noise.atoms[t], dtype=float)[atom[t]])
        return cls(noise=noise, root_atom=root_atom, parent=parent, atom=atom, prob=prob, xi=xi)

    @property
    def horizon(self):
        return self.noise.horizon

    def node_counts(self):
        return [len(p) for p in self.prob]

    def variable_count(self, n_units):
        counts = self.node_counts()
        return n_units * (sum(counts[:-1]) + sum(counts[1:]))


# ---------------------------------------------------------------------------
# Exact KKT solve


@dataclass
class QuadraticSolution:
    controls: list         # per level t=0..T-1, (n_t, N)
    states: list           # per level t=0..T (t=0 is the broadcast x0), (n_t, N)
    multipliers: list      # per level t=0..T-1, (n_t,) adapted lambda_n
    value: float
    kkt_residual: float
    coupling_residual: float
    dynamics_residual: float


def kkt_solve(spec: QuadraticSpec, tree: ScenarioTree, *, max_variables=KKT_VARIABLE_CAP):
    """Solve the tree-indexed quadratic program exactly.

    Assembles the symmetric KKT system of the probability-weighted QP
    (variables u at levels 0..T-1 and x at levels 1..T; constraints: one
    coupling row per non-leaf node, one dynamics row per (edge, unit)) and
    solves it densely.  Refuses trees beyond ``max_variables`` primal
    variables.
    """
    N = spec.n_units
    T = spec.horizon
    if tree.horizon != T:
        raise DadpError(f"tree horizon {tree.horizon} != spec horizon {T}")
    nv = tree.variable_count(N)
    if nv > max_variables:
        raise DadpError(
            f"scenario tree needs {nv} variables, above the dense-solve guard {max_variables}"
        )
    counts = tree.node_counts()
    c = spec.costs
    gam = spec.terminal_weights
    x0 = spec.initial_states

    u_off = []
    pos = 0
    for t in range(T):
        u_off.append(pos)
        pos += counts[t] * N
    x_off = {}
    for t in range(1, T + 1):
        x_off[t] = pos
        pos += counts[t] * N
    assert pos == nv

    nc = sum(counts[:T]) + N * sum(counts[1:])
    cpl_off = []
    cpos = 0
    for t in range(T):
        cpl_off.append(cpos)
        cpos += counts[t]
    dyn_off = {}
    for t in range(1, T + 1):
        dyn_off[t] = cpos
        cpos += counts[t] * N
    assert cpos == nc

    def ui(t, node, i):
        return u_off[t] + node * N + i

    def xiv(t, node, i):
        return x_off[t] + node * N + i

    K = np.zeros((nv + nc, nv + nc))
    rhs = np.zeros(nv + nc)

    for t in range(T):
        p = tree.prob[t]
        for node in range(counts[t]):
            for i in range(N):
                K[ui(t, node, i), ui(t, node, i)] = p[node] * c[i]
    for node in range(counts[T]):
        p = tree.prob[T][node]
        for i in range(N):
            K[xiv(T, node, i), xiv(T, node, i)] = p * gam[i]
            rhs[xiv(T, node, i)] = p * gam[i] * x0[i]

    for t in range(T):
        for node in range(counts[t]):
            row = nv + cpl_off[t] + node
            for i in range(N):
                K[row, ui(t, node, i)] = 1.0
                K[ui(t, node, i), row] = 1.0
            rhs[row] = tree.xi[t][node, 0]
    for t in range(1, T + 1):
        for node in range(counts[t]):
            par = tree.parent[t][node]
            for i in range(N):
                row = nv + dyn_off[t] + node * N + i
                K[row, xiv(t, node, i)] = 1.0
                K[xiv(t, node, i), row] = 1.0
                K[row, ui(t - 1, par, i)] = 1.0
                K[ui(t - 1, par, i), row] = 1.0
                b = tree.xi[t][node, 1 + i]
                if t == 1:
                    b += x0[i]
                else:
                    K[row, xiv(t - 1, par, i)] = -1.0
                    K[xiv(t - 1, par, i), row] = -1.0
                rhs[row] = b

    try:
        z = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as e:
        raise DadpError("singular KKT system (degenerate spec)") from e
    scale = 1.0 + float(np.max(np.abs(rhs)))
    kkt_res = float(np.max(np.abs(K @ z - rhs))) / scale

    controls = [z[u_off[t] : u_off[t] + counts[t] * N].reshape(counts[t], N) for t in range(T)]
    states = [np.tile(x0, (1, 1))]
    for t in range(1, T + 1):
        states.append(z[x_off[t] : x_off[t] + counts[t] * N].reshape(counts[t], N))
    multipliers = []
    for t in range(T):
        mu = z[nv + cpl_off[t] : nv + cpl_off[t] + counts[t]]
        multipliers.append(-mu / tree.prob[t])

    value = 0.0
    for t in range(T):
        value += float(np.sum(tree.prob[t][:, None] * 0.5 * c * controls[t] ** 2))
    value += float(np.sum(tree.prob[T][:, None] * 0.5 * gam * (states[T] - x0) ** 2))

    cpl = max(
        float(np.max(np.abs(controls[t].sum(axis=1) - tree.xi[t][:, 0]))) for t in range(T)
    )
    dyn = 0.0
    for t in range(1, T + 1):
        prev = states[t - 1][tree.parent[t]] if t > 1 else np.broadcast_to(x0, (counts[1], N))
        pred = prev - controls[t - 1][tree.parent[t]] + tree.xi[t][:, 1:]
        dyn = max(dyn, float(np.max(np.abs(states[t] - pred))))

    return QuadraticSolution(
        controls=controls,
        states=states,
        multipliers=multipliers,
        value=value,
        kkt_residual=kkt_res,
        coupling_residual=cpl,
        dynamics_residual=dyn,
    )


def closed_form_on_tree(spec: QuadraticSpec, tree: ScenarioTree):
    """Closed-form multipliers evaluated at every non-leaf tree node."""
    alpha = spec.alpha()
    C = spec.inverse_cost_sum
    T = spec.horizon
    lam = []
    d0 = tree.xi[0][0, 0]
    lam0 = (
        d0 * (1 + alpha)
        + alpha * sum(spec.demand_mean(s) for s in range(1, T))
        - alpha * sum(spec.total_inflow_mean(s) for s in range(1, T + 1))
    ) / C
    lam.append(np.array([lam0]))
    for t in range(1, T):
        d_here = tree.xi[t][:, 0]
        a_here = tree.xi[t][:, 1:].sum(axis=1)
        d_prev = tree.xi[t - 1][tree.parent[t], 0]
        lam.append(
            lam[t - 1][tree.parent[t]]
            + (
                d_here * (1 + alpha)
                - d_prev
                - alpha * spec.demand_mean(t)
                - alpha * (a_here - spec.total_inflow_mean(t))
            )
            / C
        )
    return lam


# ---------------------------------------------------------------------------
# Verification


@dataclass
class VerificationReport:
    passed: bool
    hypothesis_ok: bool
    max_deviation: float
    kkt_residual: float
    tolerance: float
    message: str
    deviations: list | None = None   # per level t=0..T-1, (n_t,)
    closed: list | None = None
    solved: list | None = None

    def text(self):
        lines = []
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"multiplier-dynamics verification: {status}")
        if not self.hypothesis_ok:
            lines.append(f"  hypothesis failure: {self.message}")
        else:
            lines.append(f"  max |closed-form - KKT| = {self.max_deviation:.3e} (tol {self.tolerance:g})")
            lines.append(f"  KKT residual (relative) = {self.kkt_residual:.3e}")
        return "\n".join(lines)

    def write_csv(self, path):
        header = ["t", "node", "lambda_closed", "lambda_kkt", "deviation"]
        rows = []
        if self.deviations is not None:
            for t, dev in enumerate(self.deviations):
                for node in range(len(dev)):
                    rows.append(
                        [t, node, fmt(self.closed[t][node]), fmt(self.solved[t][node]), fmt(dev[node])]
                    )
        write_rows(path, header, rows)


def verify_proposition(spec: QuadraticSpec, tree: ScenarioTree, *, tolerance=1e-6):
    """Compare closed-form and KKT multipliers node by node.

    A spec violating the proportionality hypothesis yields a hypothesis-
    failure report (not a numeric mismatch).
    """
    try:
        closed = closed_form_on_tree(spec, tree)
    except HypothesisError as e:
        return VerificationReport(
            passed=False,
            hypothesis_ok=False,
            max_deviation=float("nan"),
            kkt_residual=float("nan"),
            tolerance=tolerance,
            message=str(e),
        )
    sol = kkt_solve(spec, tree)
    devs = [np.abs(closed[t] - sol.multipliers[t]) for t in range(spec.horizon)]
    worst = max(float(d.max()) for d in devs)
    return VerificationReport(
        passed=worst <= tolerance,
        hypothesis_ok=True,
        max_deviation=worst,
        kkt_residual=sol.kkt_residual,
        tolerance=tolerance,
        message="",
        deviations=devs,
        closed=closed,
        solved=sol.multipliers,
    )


# ---------------------------------------------------------------------------
# Bridges to the decomposition solver


def warm_start(spec: QuadraticSpec, *, sample_count=200, seed=0):
    """Fit a demand-driven price model to sampled closed-form trajectories.

    The decomposition solver dualizes the coupling as ``cost + lambda . g``
    with g the production contribution, so its equilibrium multipliers are
    the *negatives* of the closed-form prices (which satisfy the opposite
    stationarity c_i u = lambda); the fit therefore targets the negated
    trajectories.  At alpha = 0 the closed form is exactly beta_t = -1/C, so
    the fit is a fixed point; for alpha > 0 the inflow term lies outside the
    family and the regression returns its least-squares shadow.
    """
    from .model import sample_paths

    paths = sample_paths(spec.noise, seed, sample_count)
    T = spec.horizon
    lams = -np.stack([closed_form_lambda(spec, p) for p in paths])[:, :, None]
    demands = np.stack([p.realizations[:T, 0] for p in paths])
    return regress(PricePathSamples(lambdas=lams, demands=demands, paths=list(paths))).model


def to_problem(spec: QuadraticSpec, *, control_cap=None, state_cap=None, slack_unit=-1):
    """Package the instance for the grid solvers, with enclosing boxes.

    The original program has no bounds, so boxes must be wide enough not to
    bind: defaults scale the worst-case demand split and inflow totals by a
    safety factor.  ``slack_unit`` picks the unit used for feasibility
    restoration (-1 = last, None = none).
    """
    N = spec.n_units
    T = spec.horizon
    noise = spec.noise
    dmax = max(float(np.max(np.abs(noise.atoms[t][:, 0]))) for t in range(T + 1))
    amax = max(
        (float(np.max(np.abs(noise.atoms[t][:, 1:]))) if N else 0.0) for t in range(T + 1)
    )
    try:
        alpha = spec.alpha()
    except HypothesisError:
        alpha = float(np.max(spec.terminal_weights / spec.costs))
    if control_cap is None:
        cbar = 1.0 / spec.inverse_cost_sum
        control_cap = [
            2.0 * (1.0 + alpha * T) * max(dmax, 1.0) * cbar / spec.costs[i] + amax + 1.0
            for i in range(N)
        ]
    elif np.isscalar(control_cap):
        control_cap = [float(control_cap)] * N
    if state_cap is None:
        state_cap = [
            abs(spec.initial_states[i]) + T * (control_cap[i] + amax) + 1.0 for i in range(N)
        ]
    elif np.isscalar(state_cap):
        state_cap = [float(state_cap)] * N

    units = []
    for i in range(N):
        ci = float(spec.costs[i])
        gi = float(spec.terminal_weights[i])
        x0i = float(spec.initial_states[i])
        coord = 1 + i

        def dyn(x, u, xi, t, _c=coord):
            return x - u + np.asarray(xi, dtype=float)[..., _c : _c + 1]

        def cost(x, u, xi, t, _ci=ci):
            return 0.5 * _ci * u[..., 0] ** 2

        def term(x, _gi=gi, _x0=x0i):
            return 0.5 * _gi * (x[..., 0] - _x0) ** 2

        units.append(
            make_unit(
                f"unit{i}",
                T,
                control_dim=1,
                state_dim=1,
                dynamics=dyn,
                stage_cost=cost,
                terminal_cost=term,
                coupling=linear_coupling([1.0]),
                initial_state=[x0i],
                state_bounds=([x0i - state_cap[i]], [x0i + state_cap[i]]),
                control_bounds=([-control_cap[i]], [control_cap[i]]),
                noise_coords=(coord,),
            )
        )
    if slack_unit is not None and slack_unit < 0:
        slack_unit += N
    return ProblemSpec(
        subsystems=tuple(units),
        noise=noise,
        coupling_dim=1,
        demand_coordinate=0,
        slack_unit=slack_unit,
        name="quadratic-split",
    )

"""Grid-based stochastic dynamic programming on finite noise supports.

The same backward solver serves two purposes:

* ``joint_solve`` treats the full coupled problem on the joint state grid,
  enforcing the coupling constraint at every stage.  When the target varies
  with the observed noise, the minimization is carried out per distinct
  target value and the recursion conditions the next-stage value on the
  next observation, so the finite-support expectation stays exact even when
  the target coordinate is correlated with the transition coordinates.
* with ``coupled=False`` it solves an unconstrained single-unit problem;
  the coordination layer feeds it price-augmented subproblems.

Infeasibility is encoded as +inf values: a candidate control is admissible
at (t, x) only if every noise atom keeps the next state inside the state
box.  Interpolation returns +inf as soon as any participating cell corner
(one with positive weight) is +inf.  Reachable states inside the state box
but outside the grid hull are a hard error; grids are required to cover the
per-time state boxes, so this only happens with hand-built grids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .ioutil import fmt, parse, write_rows, read_rows
from .model import DadpError, ValidatedProblem, collapse_atoms

__all__ = [
    "SolverError",
    "Grid",
    "ValueFunction",
    "ControlMesh",
    "FeedbackPolicy",
    "SweepSolution",
    "JointSolution",
    "BellmanResult",
    "interpolate",
    "bellman_update",
    "backward_sweep",
    "joint_solve",
    "JointTrajectories",
    "simulate_joint",
    "regular_state_grids",
    "uniform_mesh",
    "write_solution_csv",
    "read_solution_csv",
]

_TOL = 1e-9  # feasibility / hull slack for floating-point dust


class SolverError(DadpError):
    """Solver-level failure: bad grids, infeasible start, cap exceeded."""


# ---------------------------------------------------------------------------
# Grids, value functions, candidate meshes


@dataclass(frozen=True)
class Grid:
    """Rectangular grid: one strictly increasing level array per dimension.

    A dimension may be degenerate (a single level); interpolation then pins
    queries to that level.  ``shape`` is the nodal array shape, ``nodes()``
    enumerates nodes in C order (last dimension fastest).
    """

    levels: tuple

    def __post_init__(self):
        lv = tuple(np.asarray(l, dtype=float).reshape(-1) for l in self.levels)
        for k, l in enumerate(lv):
            if l.size == 0:
                raise SolverError(f"grid dimension {k} has no levels")
            if np.any(np.diff(l) <= 0):
                raise SolverError(f"grid levels must be strictly increasing (dimension {k})")
        object.__setattr__(self, "levels", lv)

    @property
    def ndim(self):
        return len(self.levels)

    @property
    def shape(self):
        return tuple(len(l) for l in self.levels)

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.levels else 1

    def nodes(self):
        if not self.levels:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*self.levels, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def lower(self):
        return np.array([l[0] for l in self.levels])

    def upper(self):
        return np.array([l[-1] for l in self.levels])

    @classmethod
    def regular(cls, lower, upper, num):
        """Uniform levels per dimension; a collapsed dimension (lower ==
        upper) gets the single shared level regardless of ``num``."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        num = np.broadcast_to(np.asarray(num, dtype=int), lower.shape)
        levels = []
        for lo, hi, n in zip(lower, upper, num):
            if hi < lo:
                raise SolverError(f"grid bounds inverted: [{lo}, {hi}]")
            if hi == lo:
                levels.append(np.array([lo]))
            else:
                if n < 2:
                    raise SolverError("need at least 2 levels for a non-degenerate dimension")
                levels.append(np.linspace(lo, hi, int(n)))
        return cls(tuple(levels))


@dataclass(frozen=True)
class ValueFunction:
    """Nodal values of the cost-to-go at one time step (+inf = infeasible)."""

    t: int
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if np.any(np.isnan(v)):
            raise SolverError(f"value function at t={self.t} contains NaN")
        object.__setattr__(self, "values", v)

    def __call__(self, x):
        return interpolate(self, x)


@dataclass(frozen=True)
class ControlMesh:
    """Finite candidate controls, per unit and per time step.

    ``candidates[i][t]`` is an (M, m_i) array inside the unit's control box.
    Joint-solver candidates are the cross product over units (first unit's
    index varying slowest), which also fixes the argmin tie-break order.
    """

    candidates: tuple

    def at(self, unit, t):
        return self.candidates[unit][t]

    @classmethod
    def uniform(cls, problem: ValidatedProblem, counts):
        """Uniform per-dimension candidate grids from the control bounds.

        ``counts`` is a scalar, or a per-unit list of scalars / per-dimension
        lists.  Collapsed dimensions (equal bounds) get a single candidate.
        """
        spec = problem.spec
        T = problem.T
        if np.isscalar(counts):
            counts = [counts] * len(spec.subsystems)
        per_unit = []
        for unit, cnt in zip(spec.subsystems, counts):
            cnt_vec = np.broadcast_to(np.asarray(cnt, dtype=int), (unit.control_dim,))
            tables = []
            for t in range(T):
                axes = []
                for j in range(unit.control_dim):
                    lo, hi = unit.control_lower[t, j], unit.control_upper[t, j]
                    if hi < lo:
                        raise SolverError(f"unit {unit.name!r}: inverted control bounds at t={t}")
                    axes.append(
                        np.array([lo]) if hi == lo else np.linspace(lo, hi, max(int(cnt_vec[j]), 2))
                    )
                prod = np.meshgrid(*axes, indexing="ij")
                tables.append(np.stack([a.ravel() for a in prod], axis=-1))
            per_unit.append(tuple(tables))
        return cls(tuple(per_unit))


@dataclass
class FeedbackPolicy:
    """Tabulated argmin controls per (t, observed-target row, grid node).

    ``tables[t]`` has shape (J_t, G_t, m_total); rows of NaN mark nodes with
    no admissible candidate.  ``target_values[t]`` holds the J_t distinct
    coupling targets (None for unconstrained solves), ``atom_to_row[t]``
    maps a time-t noise atom index to its row.
    """

    horizon: int
    tables: list
    target_values: list
    atom_to_row: list
    grids: list

    def control(self, t, node_index, atom=0):
        row = 0 if self.atom_to_row[t] is None else int(self.atom_to_row[t][atom])
        return self.tables[t][row, node_index]


@dataclass
class SweepSolution:
    """Everything a backward sweep produces."""

    value_functions: list  # length T+1 (marginal values)
    conditioned: list      # per t: (J_t, G_t) nodal values; [T] has J = 1
    policy: FeedbackPolicy
    grids: list
    mesh: ControlMesh
    coupled: bool


@dataclass
class JointSolution:
    sweep: SweepSolution
    optimal_cost: float

    @property
    def value_functions(self):
        return self.sweep.value_functions

    @property
    def policy(self):
        return self.sweep.policy


@dataclass
class BellmanResult:
    """One Bellman minimization: values/controls per observed-target row."""

    values: np.ndarray    # (J,)
    controls: np.ndarray  # (J, m_total)
    targets: np.ndarray | None

    @property
    def value(self):
        if self.values.shape != (1,):
            raise SolverError("scalar access on a multi-target Bellman result")
        return float(self.values[0])

    @property
    def control(self):
        if self.values.shape != (1,):
            raise SolverError("scalar access on a multi-target Bellman result")
        return self.controls[0]


# ---------------------------------------------------------------------------
# Multilinear interpolation


def _locate(levels, q):
    """Cell index and fractional position of queries along one dimension."""
    n = len(levels)
    scale = max(1.0, abs(float(levels[0])), abs(float(levels[-1])))
    tol = _TOL * scale
    if np.any(q < levels[0] - tol) or np.any(q > levels[-1] + tol):
        bad = q[(q < levels[0] - tol) | (q > levels[-1] + tol)]
        raise SolverError(
            f"point outside grid hull [{levels[0]}, {levels[-1]}]: {float(np.ravel(bad)[0])!r}"
        )
    if n == 1:
        return np.zeros(q.shape, dtype=int), np.zeros(q.shape)
    idx = np.clip(np.searchsorted(levels, q, side="right") - 1, 0, n - 2)
    frac = (q - levels[idx]) / (levels[idx + 1] - levels[idx])
    return idx, np.clip(frac, 0.0, 1.0)


def _interp_table(values, grid: Grid, points, clip=False):
    """Multilinear interpolation of nodal ``values`` at ``points`` (..., n).

    +inf corners with positive weight force +inf; zero-weight corners never
    contribute (an exact node hit returns the nodal value even next to an
    infeasible node).  ``clip=True`` clamps queries into the hull first
    (used internally after box feasibility is established separately).
    """
    pts = np.asarray(points, dtype=float)
    n = grid.ndim
    if n == 0:
        return np.broadcast_to(np.asarray(values, float).reshape(()), pts.shape[:-1]).copy()
    flat = pts.reshape(-1, n)
    if clip:
        flat = np.clip(flat, grid.lower(), grid.upper())
    vals = np.asarray(values, dtype=float).reshape(-1)
    shape = grid.shape
    strides = np.ones(n, dtype=int)
    for k in range(n - 2, -1, -1):
        strides[k] = strides[k + 1] * shape[k + 1]
    idx = np.empty((flat.shape[0], n), dtype=int)
    frac = np.empty_like(flat)
    for k in range(n):
        idx[:, k], frac[:, k] = _locate(grid.levels[k], flat[:, k])
    out = np.zeros(flat.shape[0])
    inf_hit = np.zeros(flat.shape[0], dtype=bool)
    for corner in itertools.product((0, 1), repeat=n):
        if any(c and len(grid.levels[k]) == 1 for k, c in enumerate(corner)):
            continue  # degenerate dimensions have a single corner
        w = np.ones(flat.shape[0])
        offset = np.zeros(flat.shape[0], dtype=int)
        for k, c in enumerate(corner):
            if len(grid.levels[k]) > 1:
                w = w * (frac[:, k] if c else 1.0 - frac[:, k])
            offset += (idx[:, k] + c) * strides[k]
        cv = vals[offset]
        live = w > 0.0
        inf_corner = live & np.isinf(cv)
        inf_hit |= inf_corner
        out += np.where(live & ~inf_corner, w * np.where(np.isinf(cv), 0.0, cv), 0.0)
    out[inf_hit] = np.inf
    return out.reshape(pts.shape[:-1])


def interpolate(value_function: ValueFunction, x):
    """Multilinear interpolation; error for points outside the grid hull."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    out = _interp_table(value_function.values, value_function.grid, pts)
    return float(out) if single and out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Stage preparation


class _StageNoise:
    """Per-stage transition noise, with zero-weight atoms dropped and
    equivalent atoms collapsed when every unit declares its coordinates."""

    def __init__(self, vp: ValidatedProblem, t, coupled, next_rows_full):
        atoms = np.asarray(vp.atoms(t + 1), dtype=float)
        w = np.asarray(vp.weights(t + 1), dtype=float)
        rows = np.asarray(next_rows_full, dtype=int)
        keep = w > 0
        atoms, w, rows = atoms[keep], w[keep], rows[keep]
        coords = set()
        collapsible = True
        for unit in vp.subsystems:
            if unit.noise_coords is None:
                collapsible = False
                break
            coords.update(unit.noise_coords)
        if collapsible and vp.spec.demand_coordinate is not None:
            coords.add(vp.spec.demand_coordinate)
        if collapsible and vp.spec.coupling_target is not None:
            collapsible = False  # opaque target: cannot prove row constancy
        if collapsible:
            rep, wsum, inverse = collapse_atoms(atoms, w, sorted(coords))
            rep_rows = np.array([rows[np.argmax(inverse == g)] for g in range(len(rep))])
            if np.all(rows == rep_rows[inverse]):
                atoms, w, rows = rep, wsum, rep_rows
        self.atoms = atoms
        self.weights = w
        self.next_rows = rows


def _product_controls(meshes):
    """Cross product of per-unit candidate arrays -> (M, sum m_i)."""
    if not meshes:
        return np.zeros((1, 0))
    sizes = [len(m) for m in meshes]
    grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
    cols = [m[g.ravel()] for m, g in zip(meshes, grids)]
    return np.concatenate(cols, axis=1)


def _check_grid_covers(grid: Grid, lo, hi, t):
    if grid.ndim != len(lo):
        raise SolverError(f"grid at t={t} has {grid.ndim} dimensions, state has {len(lo)}")
    for k in range(grid.ndim):
        if grid.levels[k][0] > lo[k] + _TOL or grid.levels[k][-1] < hi[k] - _TOL:
            raise SolverError(
                f"grid at t={t} does not cover the state box in dimension {k}: "
                f"levels span [{grid.levels[k][0]}, {grid.levels[k][-1]}], "
                f"box is [{lo[k]}, {hi[k]}]"
            )


class _Stage:
    """All time-t data the Bellman minimization needs, batched over states."""

    def __init__(self, vp, t, grids, mesh, coupled, eta):
        self.vp = vp
        self.t = t
        self.coupled = bool(coupled)
        spec = vp.spec
        T = vp.T
        if t + 1 == T or not self.coupled:
            rows_full = np.zeros(len(vp.atoms(t + 1)), dtype=int)
        else:
            rows_full = vp.atom_to_obs[t + 1]
        self.noise = _StageNoise(vp, t, self.coupled, rows_full)
        self.next_grid = grids[t + 1]
        self.next_lo, self.next_hi = vp.joint_state_bounds(t + 1)
        self.slack = spec.slack_unit if (self.coupled and spec.slack_unit is not None) else None
        self.meshes = [mesh.at(i, t) for i in range(vp.n_units)]
        used = [m for i, m in enumerate(self.meshes) if i != self.slack]
        self.U_base = _product_controls(used)  # (M, m_total - m_slack)
        if self.coupled:
            self.obs_targets = vp.obs_values[t]   # (J, d)
            self.obs_weights = vp.obs_weights[t]
        else:
            self.obs_targets = None
            self.obs_weights = np.ones(1)
        self.eta = eta

    # -- helpers ---------------------------------------------------------

    def _insert_slack(self, U_base_full, u_slack):
        """Place the solved slack block into the full control array."""
        vp = self.vp
        B, M = u_slack.shape[:2]
        out = np.empty((B, M, vp.total_control_dim))
        out[:] = U_base_full[None, :, :]
        out[..., vp.control_slices[self.slack]] = u_slack
        return out

    def _base_full(self):
        """Base product controls scattered into full layout (slack cols NaN)."""
        vp = self.vp
        M = len(self.U_base)
        out = np.full((M, vp.total_control_dim), np.nan)
        col = 0
        for i in range(vp.n_units):
            if i == self.slack:
                continue
            m = vp.control_dims[i]
            out[:, vp.control_slices[i]] = self.U_base[:, col:col + m]
            col += m
        return out


def _eval_stage(stage: _Stage, X, next_cond):
    """Bellman minimization at states X (B, n) for one time step.

    Returns (values (J, B), controls (J, B, m_total)).
    """
    vp = stage.vp
    t = stage.t
    spec = vp.spec
    atoms = stage.noise.atoms          # (K, p)
    w = stage.noise.weights            # (K,)
    next_rows = stage.noise.next_rows  # (K,)
    K = len(atoms)
    B = X.shape[0]
    U_full = stage._base_full()        # (M, m_total), slack cols NaN
    M = len(U_full)
    slack = stage.slack

    # Contributions independent of the observed target: every unit except the
    # slack one (whose control is solved per target row below).
    L_base = np.zeros((B, M, K))
    NX = np.empty((B, M, K, vp.total_state_dim))
    feas = np.ones((B, M), dtype=bool)
    g_others = np.zeros((B, M, spec.coupling_dim))
    for i, unit in enumerate(spec.subsystems):
        if i == slack:
            continue
        x_i = X[:, vp.state_slices[i]][:, None, None, :]        # (B,1,1,n_i)
        u_i = U_full[None, :, None, vp.control_slices[i]]       # (1,M,1,m_i)
        L_base += np.asarray(unit.stage_cost(x_i, u_i, atoms[None, None], t), dtype=float)
        if unit.state_dim:
            nx = np.asarray(unit.dynamics(x_i, u_i, atoms[None, None], t), dtype=float)
            nx = np.broadcast_to(nx, (B, M, K, unit.state_dim))
            NX[..., vp.state_slices[i]] = nx
            sl = vp.state_slices[i]
            lo = stage.next_lo[sl]
            hi = stage.next_hi[sl]
            feas &= np.all((nx >= lo - _TOL) & (nx <= hi + _TOL), axis=(2, 3))
        if stage.coupled:
            g = np.asarray(
                unit.coupling(X[:, vp.state_slices[i]][:, None, :], u_i[:, :, 0, :], t),
                dtype=float,
            )
            g_others += np.broadcast_to(g, (B, M, spec.coupling_dim))

    J = len(stage.obs_weights)
    values = np.full((J, B), np.inf)
    controls = np.full((J, B, vp.total_control_dim), np.nan)

    if slack is None:
        # Next value and expectation computed once.
        EW = _expected_next(stage, NX, next_cond, next_rows, w, L_base)
        EW = np.where(feas, EW, np.inf)
        if not stage.coupled:
            _argmin_into(EW, U_full, values, controls, 0)
        else:
            g_tot = g_others
            eta = stage.eta if stage.eta is not None else _default_eta(stage)
            for j in range(J):
                resid = g_tot - stage.obs_targets[j]
                ok = np.all(np.abs(resid) <= eta + _TOL, axis=-1)
                EWj = np.where(ok, EW, np.inf)
                _argmin_into(EWj, U_full, values, controls, j)
        return values, controls

    # Slack mode: close the constraint exactly through the slack unit.
    s_unit = spec.subsystems[slack]
    x_s = X[:, vp.state_slices[slack]]
    m_s = s_unit.control_dim
    d = spec.coupling_dim
    if m_s != d:
        raise SolverError(
            f"slack unit {s_unit.name!r} needs control_dim == coupling_dim "
            f"({m_s} != {d}) for exact closure"
        )
    u0 = s_unit.control_lower[t]
    g0 = np.asarray(s_unit.coupling(x_s, np.broadcast_to(u0, (B, m_s)), t), dtype=float)  # (B,d)
    cols = np.empty((B, d, m_s))
    for jcol in range(m_s):
        up = u0.copy()
        up[jcol] += 1.0
        cols[:, :, jcol] = (
            np.asarray(s_unit.coupling(x_s, np.broadcast_to(up, (B, m_s)), t), dtype=float) - g0
        )

    slack_stateless = s_unit.state_dim == 0
    EW_shared = None
    for j in range(J):
        rhs = stage.obs_targets[j][None, None, :] - g_others - g0[:, None, :]  # (B,M,d)
        if d == 1:
            denom = cols[:, 0, 0]
            if np.any(np.abs(denom) < 1e-12):
                raise SolverError(f"slack closure singular for unit {s_unit.name!r} at t={t}")
            delta = rhs / denom[:, None, None]
        else:
            try:
                delta = np.linalg.solve(cols[:, None, :, :], rhs[..., None])[..., 0]
            except np.linalg.LinAlgError as e:
                raise SolverError(
                    f"slack closure singular for unit {s_unit.name!r} at t={t}"
                ) from e
        u_s = u0[None, None, :] + delta  # (B,M,m_s)
        # Verify the affine closure actually meets the target.
        g_chk = np.asarray(s_unit.coupling(x_s[:, None, :], u_s, t), dtype=float)
        resid = g_chk + g_others - stage.obs_targets[j]
        worst = float(np.max(np.abs(resid))) if resid.size else 0.0
        if worst > 1e-7:
            raise SolverError(
                f"slack closure failed for unit {s_unit.name!r} at t={t} "
                f"(|residual| = {worst:.3e}); is its coupling affine in the control?"
            )
        ok = np.all(
            (u_s >= s_unit.control_lower[t] - _TOL) & (u_s <= s_unit.control_upper[t] + _TOL),
            axis=-1,
        )
        u_s_c = np.clip(u_s, s_unit.control_lower[t], s_unit.control_upper[t])
        L_s = np.asarray(
            s_unit.stage_cost(
                x_s[:, None, None, :], u_s_c[:, :, None, :], atoms[None, None], t
            ),
            dtype=float,
        )
        feas_j = feas & ok
        if slack_stateless:
            if EW_shared is None:
                EW_shared = _expected_next(stage, NX, next_cond, next_rows, w, None)
            EV = EW_shared + (L_base + L_s) @ w
        else:
            nx_s = np.asarray(
                s_unit.dynamics(x_s[:, None, None, :], u_s_c[:, :, None, :], atoms[None, None], t),
                dtype=float,
            )
            nx_s = np.broadcast_to(nx_s, (B, M, K, s_unit.state_dim))
            NX[..., vp.state_slices[slack]] = nx_s
            sl = vp.state_slices[slack]
            feas_j = feas_j & np.all(
                (nx_s >= stage.next_lo[sl] - _TOL) & (nx_s <= stage.next_hi[sl] + _TOL),
                axis=(2, 3),
            )
            EV = _expected_next(stage, NX, next_cond, next_rows, w, L_base + L_s)
        EV = np.where(feas_j, EV, np.inf)
        ctrl = stage._insert_slack(U_full, u_s_c)
        _argmin_into_full(EV, ctrl, values, controls, j)
    return values, controls


def _expected_next(stage, NX, next_cond, next_rows, w, L):
    """E over atoms of [L + V_{t+1}(next state)], conditioning the next value
    on the atom's observed-target row.  Returns (B, M)."""
    B, M, K, _ = NX.shape
    Wn = np.empty((B, M, K))
    for r in np.unique(next_rows):
        ks = np.nonzero(next_rows == r)[0]
        pts = NX[:, :, ks, :]
        Wn[:, :, ks] = _interp_table(
            next_cond[r], stage.next_grid, pts, clip=True
        ).reshape(B, M, len(ks))
    total = Wn if L is None else Wn + L
    # (B,M,K) @ (K,) keeps +inf rows +inf since all kept weights are > 0.
    return total @ w


def _argmin_into(EV, U_full, values, controls, j):
    """Min over shared candidates; first index wins ties."""
    best = np.argmin(EV, axis=1)
    v = EV[np.arange(EV.shape[0]), best]
    values[j] = v
    sel = np.isfinite(v)
    controls[j, sel] = U_full[best[sel]]


def _argmin_into_full(EV, ctrl, values, controls, j):
    """Same, for per-state candidate arrays (B, M, m)."""
    best = np.argmin(EV, axis=1)
    rows = np.arange(EV.shape[0])
    v = EV[rows, best]
    values[j] = v
    sel = np.isfinite(v)
    controls[j, sel] = ctrl[rows[sel], best[sel]]


def _default_eta(stage):
    """Half the largest single-direction candidate spacing (floor 1e-9)."""
    worst = 0.0
    for m in stage.meshes:
        for k in range(m.shape[1]):
            lv = np.unique(m[:, k])
            if len(lv) > 1:
                worst = max(worst, float(np.max(np.diff(lv))))
    return max(worst / 2.0, 1e-9)


# ---------------------------------------------------------------------------
# Public operations


def bellman_update(vp, t, x, next_value, mesh, *, coupled=False, eta=None):
    """One Bellman minimization at state ``x``.

    ``next_value`` is the time-(t+1) :class:`ValueFunction`.  Returns a
    :class:`BellmanResult` with one row per distinct coupling target
    observable at t (a single row for unconstrained problems).  The
    expectation over the finite noise support is exact; the next value is
    interpolated multilinearly.
    """
    if not isinstance(vp, ValidatedProblem):
        raise SolverError("bellman_update expects a validated problem")
    stage = _Stage(vp, t, {t + 1: next_value.grid}, mesh, coupled, eta)
    X = np.asarray(x, dtype=float).reshape(1, -1)
    values, controls = _eval_stage(stage, X, next_value.values.reshape(1, -1))
    return BellmanResult(
        values=values[:, 0],
        controls=controls[:, 0, :],
        targets=None if stage.obs_targets is None else stage.obs_targets,
    )


def backward_sweep(vp, grids, mesh, *, coupled=False, eta=None):
    """Backward induction over the horizon.

    ``grids`` is a list of T+1 :class:`Grid` objects over the joint state;
    each must cover that time's state box.  Returns a
    :class:`SweepSolution` whose value functions are the observation-
    marginal values; the conditioned tables (per distinct coupling target)
    are kept alongside for exact recursion, simulation and price work.
    """
    if not isinstance(vp, ValidatedProblem):
        raise SolverError("backward_sweep expects a validated problem")
    T = vp.T
    if len(grids) != T + 1:
        raise SolverError(f"need {T + 1} grids, got {len(grids)}")
    for t in range(T + 1):
        lo, hi = vp.joint_state_bounds(t)
        _check_grid_covers(grids[t], lo, hi, t)

    cond = [None] * (T + 1)
    vfs = [None] * (T + 1)
    XT = grids[T].nodes()
    vT = np.zeros(len(XT))
    for i, unit in enumerate(vp.subsystems):
        if unit.terminal_cost is not None:
            vT += np.asarray(unit.terminal_cost(XT[:, vp.state_slices[i]]), dtype=float)
    cond[T] = vT.reshape(1, -1)
    vfs[T] = ValueFunction(T, grids[T], vT)

    tables = [None] * T
    targets = [None] * T
    atom_rows = [None] * T
    for t in range(T - 1, -1, -1):
        stage = _Stage(vp, t, grids, mesh, coupled, eta)
        X = grids[t].nodes()
        values, controls = _eval_stage(stage, X, cond[t + 1])
        cond[t] = values
        wobs = stage.obs_weights
        finite_mix = np.zeros(values.shape[1])
        any_inf = np.zeros(values.shape[1], dtype=bool)
        for j in np.nonzero(wobs > 0)[0]:
            any_inf |= np.isinf(values[j])
            finite_mix += wobs[j] * np.where(np.isinf(values[j]), 0.0, values[j])
        marginal = np.where(any_inf, np.inf, finite_mix)
        vfs[t] = ValueFunction(t, grids[t], marginal)
        tables[t] = controls
        if coupled:
            targets[t] = vp.obs_values[t]
            atom_rows[t] = vp.atom_to_obs[t]
    policy = FeedbackPolicy(
        horizon=T, tables=tables, target_values=targets, atom_to_row=atom_rows, grids=list(grids)
    )
    return SweepSolution(
        value_functions=vfs, conditioned=cond, policy=policy, grids=list(grids), mesh=mesh,
        coupled=coupled,
    )


def joint_solve(vp, grids, mesh, *, dim_cap=3, eta=None):
    """Solve the coupled problem by backward induction on the joint grid.

    Refuses joint state dimensions above ``dim_cap`` (grid DP cost grows
    exponentially with dimension).  The optimal cost is the expectation over
    the observable t=0 targets of the conditioned value at the initial
    state; an infinite value means the problem is infeasible from there.
    """
    if vp.total_state_dim > dim_cap:
        raise SolverError(
            f"joint state dimension {vp.total_state_dim} exceeds the cap {dim_cap}; "
            "raise dim_cap explicitly if you really want this"
        )
    sweep = backward_sweep(vp, grids, mesh, coupled=True, eta=eta)
    x0 = vp.joint_initial_state()
    cost = float(interpolate(sweep.value_functions[0], x0))
    if not np.isfinite(cost):
        raise SolverError(
            "coupled problem infeasible at the initial state "
            f"(value at x0 = {cost}); check bounds, meshes and the coupling target"
        )
    return JointSolution(sweep=sweep, optimal_cost=cost)


@dataclass
class JointTrajectories:
    """Forward simulation of a coupled sweep along sampled noise paths."""

    states: np.ndarray          # (s, T+1, n_total)
    controls: np.ndarray        # (s, T, m_total)
    stage_costs: np.ndarray     # (s, T), summed over units
    terminal_costs: np.ndarray  # (s,)
    targets: np.ndarray         # (s, T, d)
    residuals: np.ndarray       # (s, T, d) coupling minus target

    @property
    def total_costs(self):
        return self.stage_costs.sum(axis=1) + self.terminal_costs


def simulate_joint(vp, sweep: SweepSolution, paths, *, eta=None):
    """Greedy forward simulation of the coupled policy.

    At each step the control re-minimizes current cost plus the stored
    next conditioned value at the exact visited state (same evaluator as
    the sweep, so on-grid states reproduce the tabulated policy).  Pass
    the ``eta`` used for the sweep so slack feasibility tolerances match.
    """
    if not isinstance(vp, ValidatedProblem):
        raise SolverError("simulate_joint expects a validated problem")
    spec = vp.spec
    T = vp.T
    s = len(paths)
    if s < 1:
        raise SolverError("simulation needs at least one path")
    xi_all = np.stack([p.realizations for p in paths])   # (s, T+1, p)
    atoms = np.stack([p.atom_indices for p in paths])    # (s, T+1)
    d = spec.coupling_dim
    pick = np.arange(s)

    X = np.tile(vp.joint_initial_state(), (s, 1))
    states = np.empty((s, T + 1, vp.total_state_dim))
    controls = np.empty((s, T, vp.total_control_dim))
    stage_costs = np.zeros((s, T))
    targets = np.empty((s, T, d))
    g_sum = np.zeros((s, T, d))
    states[:, 0] = X
    for t in range(T):
        targets[:, t] = spec.target_values(xi_all[:, t, :], t)
        stage = _Stage(vp, t, sweep.grids, sweep.mesh, sweep.coupled, eta)
        values, ctrl = _eval_stage(stage, X, sweep.conditioned[t + 1])
        if sweep.coupled and vp.atom_to_obs[t] is not None:
            rows = vp.atom_to_obs[t][atoms[:, t]]
        else:
            rows = np.zeros(s, dtype=int)
        v_sel = values[rows, pick]
        if np.any(~np.isfinite(v_sel)):
            sigma = int(np.argmax(~np.isfinite(v_sel)))
            raise SolverError(
                f"joint simulation found no admissible control on path {sigma} "
                f"at t={t} (state {X[sigma]}, target {targets[sigma, t]})"
            )
        u = ctrl[rows, pick]
        controls[:, t] = u
        xi_next = xi_all[:, t + 1, :]
        newX = np.empty_like(X)
        for i, unit in enumerate(vp.subsystems):
            x_i = X[:, vp.state_slices[i]]
            u_i = u[:, vp.control_slices[i]]
            stage_costs[:, t] += np.asarray(unit.stage_cost(x_i, u_i, xi_next, t), dtype=float)
            g_sum[:, t] += np.asarray(unit.coupling(x_i, u_i, t), dtype=float).reshape(s, d)
            if unit.state_dim:
                newX[:, vp.state_slices[i]] = np.asarray(
                    unit.dynamics(x_i, u_i, xi_next, t), dtype=float
                ).reshape(s, unit.state_dim)
        X = newX
        states[:, t + 1] = X
    terminal = np.zeros(s)
    for i, unit in enumerate(vp.subsystems):
        terminal += np.asarray(unit.terminal_values(X[:, vp.state_slices[i]]), dtype=float).reshape(s)
    return JointTrajectories(
        states=states,
        controls=controls,
        stage_costs=stage_costs,
        terminal_costs=terminal,
        targets=targets,
        residuals=g_sum - targets,
    )


def regular_state_grids(vp, num, *, pad=0.0):
    """Uniform joint grids covering each time's state box.

    ``num`` is a scalar or per-dimension node count; ``pad`` widens every box
    by that fraction of its width on both sides (useful for soft problems
    whose states are expected to stay strictly inside).
    """
    grids = []
    for t in range(vp.T + 1):
        lo, hi = vp.joint_state_bounds(t)
        width = hi - lo
        grids.append(Grid.regular(lo - pad * width, hi + pad * width, num))
    return grids


def uniform_mesh(vp, counts):
    return ControlMesh.uniform(vp, counts)


# ---------------------------------------------------------------------------
# Flat-table serialization


def write_solution_csv(sol: SweepSolution, path):
    """Serialize values and tabulated controls to one flat CSV.

    Columns: t, obs (distinct-target row; -1 for marginal/terminal rows),
    target components d0.., node multi-index i0.., value, control components
    u0...  Marginal rows carry the observation-averaged value and empty
    controls; conditioned rows (obs >= 0) carry the per-target value and the
    argmin control.  A separate grid table (same stem, '.grid.csv') stores
    the levels needed to rebuild the solution.
    """
    vp_dims = sol.grids[0].ndim
    m_total = sol.policy.tables[0].shape[-1] if sol.policy.tables else 0
    d = 0
    for tv in sol.policy.target_values:
        if tv is not None:
            d = tv.shape[1]
            break
    header = (
        ["t", "obs"]
        + [f"d{k}" for k in range(d)]
        + [f"i{k}" for k in range(vp_dims)]
        + ["value"]
        + [f"u{k}" for k in range(m_total)]
    )
    rows = []
    T = sol.policy.horizon
    for t in range(T + 1):
        grid = sol.grids[t]
        shape = grid.shape
        multi = list(np.ndindex(*shape)) if shape else [()]
        vf = sol.value_functions[t].values.reshape(-1)
        for g, mi in enumerate(multi):
            rows.append([t, -1] + [""] * d + list(mi) + [vf[g]] + [""] * m_total)
        if t == T:
            continue
        J = sol.conditioned[t].shape[0]
        for j in range(J):
            tv = sol.policy.target_values[t]
            dcols = list(tv[j]) if tv is not None else [""] * d
            for g, mi in enumerate(multi):
                rows.append(
                    [t, j]
                    + dcols
                    + list(mi)
                    + [sol.conditioned[t][j, g]]
                    + list(sol.policy.tables[t][j, g])
                )
    write_rows(path, header, rows)
    grows = []
    for t in range(T + 1):
        for k, lv in enumerate(sol.grids[t].levels):
            for idx, val in enumerate(lv):
                grows.append([t, k, idx, val])
    write_rows(_grid_path(path), ["t", "dim", "index", "level"], grows)


def _grid_path(path):
    path = str(path)
    return (path[:-4] if path.endswith(".csv") else path) + ".grid.csv"


def read_solution_csv(path):
    """Rebuild (grids, marginal values, conditioned values, policy tables)
    from :func:`write_solution_csv` output.

    Returns a dict with keys 'grids', 'values', 'conditioned', 'tables',
    'targets'.  Intended for artifact round-trips, not for hot paths.
    """
    gheader, grows = read_rows(_grid_path(path))
    levels = {}
    for row in grows:
        t, k, idx, val = int(row[0]), int(row[1]), int(row[2]), float(row[3])
        levels.setdefault(t, {}).setdefault(k, {})[idx] = val
    grids = []
    for t in sorted(levels):
        dims = levels[t]
        lv = []
        for k in sorted(dims):
            lv.append(np.array([dims[k][i] for i in sorted(dims[k])]))
        grids.append(Grid(tuple(lv)))
    header, rows = read_rows(path)
    nd = sum(1 for h in header if h.startswith("i"))
    d = sum(1 for h in header if h.startswith("d") and h != "dim")
    mu = sum(1 for h in header if h.startswith("u"))
    vcol = header.index("value")
    T = len(grids) - 1
    values = [np.full(grids[t].shape, np.nan) for t in range(T + 1)]
    conditioned = {}
    tables = {}
    targets = {}
    for row in rows:
        t, obs = int(row[0]), int(row[1])
        mi = tuple(int(row[2 + d + k]) for k in range(nd))
        val = parse(row[vcol])
        if obs < 0:
            values[t][mi] = val
        else:
            g = int(np.ravel_multi_index(mi, grids[t].shape)) if nd else 0
            conditioned.setdefault(t, {}).setdefault(obs, {})[g] = val
            tables.setdefault(t, {}).setdefault(obs, {})[g] = [
                parse(row[vcol + 1 + k]) for k in range(mu)
            ]
            if d:
                targets.setdefault(t, {})[obs] = [parse(row[2 + k]) for k in range(d)]
    cond_arrays = []
    table_arrays = []
    target_arrays = []
    for t in range(T):
        J = len(conditioned.get(t, {0: None}))
        G = int(np.prod(grids[t].shape)) if grids[t].shape else 1
        ca = np.full((J, G), np.nan)
        ta = np.full((J, G, mu), np.nan)
        for j, nodes in conditioned.get(t, {}).items():
            for g, v in nodes.items():
                ca[j, g] = v
                ta[j, g] = tables[t][j][g]
        cond_arrays.append(ca)
        table_arrays.append(ta)
        if t in targets:
            target_arrays.append(np.array([targets[t][j] for j in sorted(targets[t])]))
        else:
            target_arrays.append(None)
    return {
        "grids": grids,
        "values": values,
        "conditioned": cond_arrays,
        "tables": table_arrays,
        "targets": target_arrays,
    }

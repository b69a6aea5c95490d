"""Problem model for block-decomposable finite-horizon stochastic control.

A problem is a collection of independent subsystems ("units"), each with its
own state, control, dynamics and costs, tied together only through an
almost-sure static coupling constraint

    sum_i g_t^i(x_t^i, u_t^i) = d_t,     t = 0..T-1,

where the target d_t is either constant or observed at t as a designated
coordinate of the noise.

Conventions used throughout the package:

* decision stages are t = 0..T-1, the terminal time is T;
* the driving noise is a white sequence xi_0, ..., xi_T of vectors in R^p,
  each with finite support; xi_t is observed at time t, before u_t is chosen;
* stage maps consume the realization revealed during the transition:
  x_{t+1} = f_t(x_t, u_t, xi_{t+1}) and stage cost L_t(x_t, u_t, xi_{t+1});
  the coupling target at t comes from xi_t.  The non-demand coordinates of
  xi_0 are therefore never read by the stage maps;
* state bounds apply at t = 0..T, control bounds at t = 0..T-1, and bound
  constraints on next states hold almost surely (for every noise atom).

All user callables must be vectorized in the numpy sense: leading batch axes
broadcast, the trailing axis is the vector dimension.  Shapes:

    dynamics(x, u, xi, t)      (..., n_i) x (..., m_i) x (..., p) -> (..., n_i)
    stage_cost(x, u, xi, t)    -> (...)
    terminal_cost(x)           (..., n_i) -> (...)
    coupling(x, u, t)          -> (..., d)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DadpError",
    "ValidationError",
    "SubsystemSpec",
    "NoiseModel",
    "ProblemSpec",
    "NoisePath",
    "ValidatedProblem",
    "make_unit",
    "linear_coupling",
    "validate",
    "validation_issues",
    "sample_path",
    "sample_paths",
    "coupling_residual",
    "pathwise_cost",
]


class DadpError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(DadpError):
    """A problem or configuration violates a structural invariant.

    The ``issues`` attribute carries the exhaustive list of violations found,
    one human-readable string each.
    """

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("invalid problem:\n" + "\n".join("  - " + s for s in self.issues))


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class SubsystemSpec:
    """One unit of the decomposable problem.

    Bound arrays are stored per time step: ``state_lower``/``state_upper``
    have shape (T+1, state_dim), ``control_lower``/``control_upper`` shape
    (T, control_dim).  Use :func:`make_unit` to build one from scalar or
    per-dimension bounds.

    ``state_dim`` may be zero for a purely static unit (no stock, only a
    control and costs); such a unit has ``dynamics is None`` and its
    ``terminal_cost`` is taken to be zero.

    ``noise_coords`` optionally declares which coordinates of the noise
    vector the unit's dynamics and stage cost actually read.  Solvers use it
    to collapse equivalent noise atoms; leave it None when unsure.
    """

    name: str
    state_dim: int
    control_dim: int
    stage_cost: Callable
    dynamics: Callable | None
    terminal_cost: Callable | None
    coupling: Callable
    initial_state: np.ndarray
    state_lower: np.ndarray
    state_upper: np.ndarray
    control_lower: np.ndarray
    control_upper: np.ndarray
    noise_coords: tuple[int, ...] | None = None

    def terminal_values(self, x):
        if self.terminal_cost is None:
            return np.zeros(np.shape(x)[:-1])
        return np.asarray(self.terminal_cost(x), dtype=float)


@dataclass(frozen=True)
class NoiseModel:
    """White noise with finite support: one atom set per t = 0..T.

    ``atoms[t]`` is a (K_t, p) array, ``weights[t]`` a (K_t,) probability
    vector.  Independence across time is implied by the representation;
    dependence *within* a time step (between coordinates of xi_t) is allowed.
    """

    horizon: int
    atoms: tuple
    weights: tuple

    @property
    def dim(self) -> int:
        return int(self.atoms[0].shape[1])

    @classmethod
    def from_lists(cls, horizon, atoms, weights):
        atoms = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in atoms)
        weights = tuple(np.asarray(w, dtype=float) for w in weights)
        return cls(horizon, atoms, weights)

    @classmethod
    def deterministic(cls, horizon, values):
        """A Dirac noise model: one atom per time step."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        atoms = tuple(values[t][None, :] for t in range(horizon + 1))
        weights = tuple(np.ones(1) for _ in range(horizon + 1))
        return cls(horizon, atoms, weights)


@dataclass(frozen=True)
class ProblemSpec:
    """The coupled problem: units, noise, and the coupling description.

    The coupling right-hand side d_t is, in order of precedence:
    ``coupling_target(xi_t, t)`` if given, else the ``demand_coordinate`` of
    xi_t replicated to R^coupling_dim, else the zero vector.

    ``slack_unit`` optionally names a unit whose control enters the coupling
    affinely and invertibly; the joint solver then closes the constraint
    exactly through that unit instead of meshing its control, and the primal
    feasibility restoration substitutes through it.
    """

    subsystems: tuple
    noise: NoiseModel
    coupling_dim: int = 1
    demand_coordinate: int | None = None
    coupling_target: Callable | None = None
    slack_unit: int | None = None
    name: str = ""

    @property
    def horizon(self) -> int:
        return self.noise.horizon

    def target_values(self, xi, t):
        """Coupling right-hand side for realization(s) ``xi`` at time t.

        ``xi`` has shape (..., p); the result has shape (..., coupling_dim).
        """
        xi = np.asarray(xi, dtype=float)
        if self.coupling_target is not None:
            out = np.asarray(self.coupling_target(xi, t), dtype=float)
            if out.shape != xi.shape[:-1] + (self.coupling_dim,):
                raise ValueError(
                    f"coupling_target returned shape {out.shape}, "
                    f"expected {xi.shape[:-1] + (self.coupling_dim,)}"
                )
            return out
        if self.demand_coordinate is not None:
            dem = xi[..., self.demand_coordinate]
            return np.broadcast_to(dem[..., None], dem.shape + (self.coupling_dim,)).copy()
        return np.zeros(xi.shape[:-1] + (self.coupling_dim,))


@dataclass(frozen=True)
class NoisePath:
    """One sampled scenario: realizations xi_0..xi_T and their atom indices."""

    realizations: np.ndarray  # (T+1, p)
    atom_indices: np.ndarray  # (T+1,) int
    seed: int | None = None


# ---------------------------------------------------------------------------
# Constructors


def _per_time(value, steps, dim, what):
    """Broadcast a scalar / (dim,) vector / (steps, dim) array to (steps, dim)."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full((steps, dim), float(arr))
    elif arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValueError(f"{what}: expected length {dim}, got {arr.shape[0]}")
        arr = np.tile(arr, (steps, 1))
    elif arr.shape != (steps, dim):
        raise ValueError(f"{what}: expected shape {(steps, dim)}, got {arr.shape}")
    return arr.copy()


def linear_coupling(control_weights, state_weights=None):
    """Coupling map g(x, u) = W_u u (+ W_x x) with constant weight matrices.

    ``control_weights`` is (d, m) or a length-m vector for d = 1.
    """
    W_u = np.atleast_2d(np.asarray(control_weights, dtype=float))
    W_x = None if state_weights is None else np.atleast_2d(np.asarray(state_weights, dtype=float))

    def g(x, u, t):
        out = u @ W_u.T
        if W_x is not None:
            out = out + x @ W_x.T
        return out

    return g


def make_unit(
    name,
    horizon,
    *,
    control_dim,
    stage_cost,
    state_dim=0,
    dynamics=None,
    terminal_cost=None,
    coupling=None,
    initial_state=(),
    state_bounds=(0.0, 0.0),
    control_bounds=(0.0, 0.0),
    noise_coords=None,
):
    """Build a :class:`SubsystemSpec`, broadcasting bounds over time.

    ``state_bounds`` and ``control_bounds`` are (lower, upper) pairs where
    each side may be a scalar, a per-dimension vector, or a full per-time
    array.  A missing ``coupling`` means the unit does not contribute to the
    constraint (it is taken as zero with coupling dimension 1; solvers use
    the problem-level coupling_dim to check shapes, so give an explicit map
    whenever coupling_dim > 1).
    """
    n, m, T = int(state_dim), int(control_dim), int(horizon)
    if coupling is None:
        coupling = lambda x, u, t: np.zeros(np.shape(u)[:-1] + (1,))
    x0 = np.asarray(initial_state, dtype=float).reshape(n)
    slo, shi = state_bounds
    clo, chi = control_bounds
    return SubsystemSpec(
        name=name,
        state_dim=n,
        control_dim=m,
        stage_cost=stage_cost,
        dynamics=dynamics,
        terminal_cost=terminal_cost,
        coupling=coupling,
        initial_state=x0,
        state_lower=_per_time(slo, T + 1, n, f"unit {name!r} state lower bound"),
        state_upper=_per_time(shi, T + 1, n, f"unit {name!r} state upper bound"),
        control_lower=_per_time(clo, T, m, f"unit {name!r} control lower bound"),
        control_upper=_per_time(chi, T, m, f"unit {name!r} control upper bound"),
        noise_coords=None if noise_coords is None else tuple(int(c) for c in noise_coords),
    )


# ---------------------------------------------------------------------------
# Validation


def validation_issues(problem: ProblemSpec):
    """Collect every structural invariant violation; empty list means valid."""
    issues = []
    noise = problem.noise
    T = noise.horizon

    if T < 1:
        issues.append(f"horizon must be >= 1, got {T}")
    if len(noise.atoms) != T + 1 or len(noise.weights) != T + 1:
        issues.append(
            f"noise must provide supports for t=0..T={T} "
            f"(got {len(noise.atoms)} atom sets, {len(noise.weights)} weight sets)"
        )
        return issues  # indexing below would be unreliable

    p = None
    for t, (a, w) in enumerate(zip(noise.atoms, noise.weights)):
        a = np.asarray(a)
        w = np.asarray(w)
        if a.ndim != 2 or a.shape[0] < 1:
            issues.append(f"noise support at t={t} must be a (K,p) array with K>=1")
            continue
        if p is None:
            p = a.shape[1]
        elif a.shape[1] != p:
            issues.append(f"noise dimension changes at t={t}: {a.shape[1]} != {p}")
        if w.shape != (a.shape[0],):
            issues.append(f"noise weights at t={t} have shape {w.shape}, expected ({a.shape[0]},)")
            continue
        if not np.all(np.isfinite(a)):
            issues.append(f"noise support at t={t} contains non-finite atoms")
        if np.any(w < 0):
            issues.append(f"noise weights at t={t} contain negative entries")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            issues.append(f"noise weights at t={t} sum to {w.sum()!r}, expected 1 (tol 1e-12)")

    if problem.coupling_dim < 1:
        issues.append(f"coupling_dim must be >= 1, got {problem.coupling_dim}")
    if problem.demand_coordinate is not None and p is not None:
        if not 0 <= problem.demand_coordinate < p:
            issues.append(
                f"demand_coordinate {problem.demand_coordinate} outside noise dimension {p}"
            )
    if not problem.subsystems:
        issues.append("problem has no subsystems")
    if problem.slack_unit is not None and not 0 <= problem.slack_unit < len(problem.subsystems):
        issues.append(f"slack_unit {problem.slack_unit} is not a unit index")

    for i, unit in enumerate(problem.subsystems):
        tag = f"unit {i} ({unit.name!r})"
        n, m = unit.state_dim, unit.control_dim
        if n < 0:
            issues.append(f"{tag}: state_dim must be >= 0")
        if m < 1:
            issues.append(f"{tag}: control_dim must be >= 1")
        if n > 0 and unit.dynamics is None:
            issues.append(f"{tag}: state_dim {n} > 0 but no dynamics")
        if n == 0 and unit.dynamics is not None:
            issues.append(f"{tag}: stateless unit must not define dynamics")
        if unit.stage_cost is None:
            issues.append(f"{tag}: stage_cost is required")
        if unit.initial_state.shape != (n,):
            issues.append(f"{tag}: initial_state shape {unit.initial_state.shape} != ({n},)")
            continue
        for arr, shape, what in [
            (unit.state_lower, (T + 1, n), "state_lower"),
            (unit.state_upper, (T + 1, n), "state_upper"),
            (unit.control_lower, (T, m), "control_lower"),
            (unit.control_upper, (T, m), "control_upper"),
        ]:
            if np.asarray(arr).shape != shape:
                issues.append(f"{tag}: {what} shape {np.asarray(arr).shape} != {shape}")
        if unit.state_lower.shape == (T + 1, n) and unit.state_upper.shape == (T + 1, n):
            bad = np.argwhere(unit.state_lower > unit.state_upper)
            for t, j in bad[:5]:
                issues.append(f"{tag}: state lower bound exceeds upper at t={t}, dim {j}")
            if n and not (
                np.all(unit.initial_state >= unit.state_lower[0] - 1e-12)
                and np.all(unit.initial_state <= unit.state_upper[0] + 1e-12)
            ):
                issues.append(f"{tag}: initial state outside the t=0 state box")
        if unit.control_lower.shape == (T, m) and unit.control_upper.shape == (T, m):
            bad = np.argwhere(unit.control_lower > unit.control_upper)
            for t, j in bad[:5]:
                issues.append(f"{tag}: control lower bound exceeds upper at t={t}, dim {j}")
        if unit.noise_coords is not None and p is not None:
            for c in unit.noise_coords:
                if not 0 <= c < p:
                    issues.append(f"{tag}: noise coordinate {c} outside noise dimension {p}")

    if issues:
        return issues

    # Cheap shape probes: one evaluation per callable at a known-good point.
    xi1 = np.asarray(noise.atoms[min(1, T)][0], dtype=float)
    for i, unit in enumerate(problem.subsystems):
        tag = f"unit {i} ({unit.name!r})"
        x = unit.initial_state
        u = unit.control_lower[0]
        try:
            c = np.asarray(unit.stage_cost(x, u, xi1, 0), dtype=float)
            if c.shape != ():
                issues.append(f"{tag}: stage_cost returned shape {c.shape}, expected scalar")
        except Exception as e:  # noqa: BLE001 - reported, not raised
            issues.append(f"{tag}: stage_cost probe failed: {e}")
        if unit.dynamics is not None:
            try:
                nx = np.asarray(unit.dynamics(x, u, xi1, 0), dtype=float)
                if nx.shape != (unit.state_dim,):
                    issues.append(
                        f"{tag}: dynamics returned shape {nx.shape}, expected ({unit.state_dim},)"
                    )
            except Exception as e:  # noqa: BLE001
                issues.append(f"{tag}: dynamics probe failed: {e}")
        if unit.terminal_cost is not None:
            try:
                k = np.asarray(unit.terminal_cost(x), dtype=float)
                if k.shape != ():
                    issues.append(f"{tag}: terminal_cost returned shape {k.shape}, expected scalar")
            except Exception as e:  # noqa: BLE001
                issues.append(f"{tag}: terminal_cost probe failed: {e}")
        try:
            g = np.asarray(unit.coupling(x, u, 0), dtype=float)
            if g.shape != (problem.coupling_dim,):
                issues.append(
                    f"{tag}: coupling returned shape {g.shape}, expected ({problem.coupling_dim},)"
                )
        except Exception as e:  # noqa: BLE001
            issues.append(f"{tag}: coupling probe failed: {e}")
    try:
        problem.target_values(xi1, 0)
    except Exception as e:  # noqa: BLE001
        issues.append(f"coupling target probe failed: {e}")
    return issues


class ValidatedProblem:
    """A :class:`ProblemSpec` that passed :func:`validate`, with derived data.

    Precomputes the joint state layout and, per time step, the distinct
    coupling targets observable at t (used by the coupled Bellman solver and
    by simulation).
    """

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        self.T = spec.noise.horizon
        self.noise_dim = spec.noise.dim
        self.n_units = len(spec.subsystems)
        self.state_dims = [u.state_dim for u in spec.subsystems]
        self.control_dims = [u.control_dim for u in spec.subsystems]
        self.total_state_dim = sum(self.state_dims)
        self.total_control_dim = sum(self.control_dims)
        self.state_slices = []
        self.control_slices = []
        ofs = 0
        for n in self.state_dims:
            self.state_slices.append(slice(ofs, ofs + n))
            ofs += n
        ofs = 0
        for m in self.control_dims:
            self.control_slices.append(slice(ofs, ofs + m))
            ofs += m

        # Distinct coupling targets per t with their probabilities and the
        # atom -> row map.  J_t == 1 when the target does not vary at t.
        self.obs_values = []   # (J_t, d)
        self.obs_weights = []  # (J_t,)
        self.atom_to_obs = []  # (K_t,) int
        for t in range(self.T):
            rows = spec.target_values(spec.noise.atoms[t], t)
            uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
            w = np.zeros(len(uniq))
            np.add.at(w, inverse, spec.noise.weights[t])
            self.obs_values.append(uniq)
            self.obs_weights.append(w)
            self.atom_to_obs.append(np.asarray(inverse, dtype=int).reshape(-1))

    # convenience passthroughs -------------------------------------------
    @property
    def subsystems(self):
        return self.spec.subsystems

    @property
    def noise(self):
        return self.spec.noise

    def atoms(self, t):
        return self.spec.noise.atoms[t]

    def weights(self, t):
        return self.spec.noise.weights[t]

    def joint_initial_state(self):
        parts = [u.initial_state for u in self.spec.subsystems if u.state_dim]
        return np.concatenate(parts) if parts else np.zeros(0)

    def joint_state_bounds(self, t):
        los = [u.state_lower[t] for u in self.spec.subsystems if u.state_dim]
        his = [u.state_upper[t] for u in self.spec.subsystems if u.state_dim]
        if not los:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(los), np.concatenate(his)

    def demand_scalar(self, xi):
        """Scalar demand coordinate of realization(s) xi, required by the
        autoregressive price model; error if the problem declares none."""
        dc = self.spec.demand_coordinate
        if dc is None:
            raise DadpError("problem declares no demand coordinate")
        return np.asarray(xi, dtype=float)[..., dc]


def validate(problem: ProblemSpec) -> ValidatedProblem:
    """Check every structural invariant; raise :class:`ValidationError` with
    the exhaustive issue list, or return the wrapped, validated problem."""
    issues = validation_issues(problem)
    if issues:
        raise ValidationError(issues)
    return ValidatedProblem(problem)


# ---------------------------------------------------------------------------
# Sampling and evaluation


def sample_path(noise: NoiseModel, seed) -> NoisePath:
    """Draw one scenario xi_0..xi_T.  Identical seed, identical path."""
    rng = np.random.default_rng(seed)
    draws = rng.random(noise.horizon + 1)
    idx = np.empty(noise.horizon + 1, dtype=int)
    for t in range(noise.horizon + 1):
        cw = np.cumsum(noise.weights[t])
        idx[t] = min(int(np.searchsorted(cw, draws[t], side="right")), len(cw) - 1)
    xi = np.stack([noise.atoms[t][idx[t]] for t in range(noise.horizon + 1)])
    return NoisePath(realizations=xi, atom_indices=idx, seed=None if seed is None else int(seed))


def sample_paths(noise: NoiseModel, seed, count) -> list:
    """Draw ``count`` independent scenarios.

    Per-path seeds are the first ``count`` words of
    ``np.random.SeedSequence(seed).generate_state``, so each returned path is
    individually reproducible through :func:`sample_path` via its ``seed``
    attribute, and the batch is reproducible from (seed, count).
    """
    ss = np.random.SeedSequence(seed)
    child = ss.generate_state(count, dtype=np.uint64)
    return [sample_path(noise, int(s)) for s in child]


def coupling_residual(problem, t, states, controls, xi=None, target=None):
    """sum_i g_t^i(x^i, u^i) minus the coupling target.

    ``states`` and ``controls`` are sequences of per-unit arrays with
    broadcastable batch shapes.  The target is ``target`` if given, else
    derived from realization ``xi`` (the time-t one), else zero.
    """
    spec = problem.spec if isinstance(problem, ValidatedProblem) else problem
    total = None
    for unit, x, u in zip(spec.subsystems, states, controls):
        g = np.asarray(unit.coupling(np.asarray(x, dtype=float), np.asarray(u, dtype=float), t))
        total = g if total is None else total + g
    if target is None:
        if xi is not None:
            target = spec.target_values(np.asarray(xi, dtype=float), t)
        else:
            target = np.zeros(spec.coupling_dim)
    return total - np.asarray(target, dtype=float)


def pathwise_cost(problem, path: NoisePath, states, controls):
    """Total realized cost of per-unit trajectories along one noise path.

    ``states[i]`` is (T+1, n_i), ``controls[i]`` is (T, m_i).  The states
    must be consistent with the unit dynamics along the path (tolerance
    1e-9); inconsistency is an error, not a warning.
    """
    spec = problem.spec if isinstance(problem, ValidatedProblem) else problem
    T = spec.noise.horizon
    xi = path.realizations
    total = 0.0
    for i, unit in enumerate(spec.subsystems):
        x = np.asarray(states[i], dtype=float).reshape(T + 1, unit.state_dim)
        u = np.asarray(controls[i], dtype=float).reshape(T, unit.control_dim)
        if unit.state_dim:
            for t in range(T):
                nx = np.asarray(unit.dynamics(x[t], u[t], xi[t + 1], t), dtype=float)
                err = float(np.max(np.abs(nx - x[t + 1])))
                if err > 1e-9:
                    raise DadpError(
                        f"trajectory inconsistent with dynamics for unit {i} "
                        f"({unit.name!r}) at t={t}: |f(x_t,u_t,xi_{t+1}) - x_{t+1}| = {err:.3e}"
                    )
        for t in range(T):
            total += float(unit.stage_cost(x[t], u[t], xi[t + 1], t))
        total += float(unit.terminal_values(x[T]))
    return total


def collapse_atoms(atoms, weights, coords):
    """Group noise atoms equal on the given coordinates.

    Returns (representatives, weights, inverse): ``representatives`` keeps one
    full atom per group (the first), ``inverse`` maps original atom index to
    group index.  With ``coords`` None the support is returned unchanged.
    """
    atoms = np.asarray(atoms, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if coords is None:
        return atoms, weights, np.arange(len(atoms))
    coords = sorted(set(int(c) for c in coords))
    if not coords:
        rep = atoms[:1]
        return rep, np.array([weights.sum()]), np.zeros(len(atoms), dtype=int)
    key = atoms[:, coords]
    uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    w = np.zeros(len(uniq))
    np.add.at(w, inverse, weights)
    # Reorder groups by first appearance in the original support.
    by_appearance = np.argsort(first)
    rank = np.argsort(by_appearance)  # old group index -> new group index
    return atoms[first[by_appearance]], w[by_appearance], rank[inverse].astype(int)

"""Parameterized dynamics of the coupling-price process.

The decomposition constrains the multiplier process to a short-memory
autoregressive family driven by the observed coupling demand:

    lambda_0 = beta_0 d_0 + gamma_0
    lambda_t = alpha_t lambda_{t-1} + beta_t d_t + gamma_t,   t = 1..T-1,

with lambda_t in R^d, alpha_t a (d, d) matrix, beta_t and gamma_t vectors
(the demand is scalar).  Fitting a model to sampled multiplier targets is a
sequence of per-stage ordinary least squares solves, each feeding its fitted
values forward as the next stage's regressor, so the fitted trajectories
obey the recursion exactly by construction.

A hook for other parametric families is declared at the bottom; the
autoregressive family is the only one shipped.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .ioutil import fmt, parse, write_rows, read_rows
from .model import NoisePath

__all__ = [
    "PriceModel",
    "PricePathSamples",
    "RegressionResult",
    "propagate",
    "propagate_demands",
    "support_range",
    "regress",
    "samples_from_paths",
    "write_price_model_csv",
    "read_price_model_csv",
    "MultiplierDynamics",
    "ArMultiplierDynamics",
]


@dataclass(frozen=True)
class PriceModel:
    """Coefficients of the autoregressive price recursion.

    ``alpha`` has shape (T, d, d) with the t=0 block unused (kept zero),
    ``beta`` and ``gamma`` shape (T, d).
    """

    horizon: int
    dim: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        T, d = self.horizon, self.dim
        a = np.asarray(self.alpha, dtype=float).reshape(T, d, d)
        b = np.asarray(self.beta, dtype=float).reshape(T, d)
        g = np.asarray(self.gamma, dtype=float).reshape(T, d)
        for name, arr in (("alpha", a), ("beta", b), ("gamma", g)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"price model {name} contains non-finite entries")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def zero(cls, horizon, dim=1):
        """The all-zero model: lambda identically zero (the usual start)."""
        return cls(horizon, dim, np.zeros((horizon, dim, dim)),
                   np.zeros((horizon, dim)), np.zeros((horizon, dim)))

    @classmethod
    def from_scalars(cls, alpha, beta, gamma):
        """Build a d=1 model from per-t coefficient sequences.

        ``alpha`` may have length T-1 (transition coefficients for t=1..T-1)
        or T (first entry ignored); ``beta`` and ``gamma`` have length T.
        """
        beta = np.asarray(beta, dtype=float).reshape(-1)
        gamma = np.asarray(gamma, dtype=float).reshape(-1)
        T = len(beta)
        a = np.zeros(T)
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        if len(alpha) == T - 1:
            a[1:] = alpha
        elif len(alpha) == T:
            a = alpha.copy()
            a[0] = 0.0
        else:
            raise ValueError(f"alpha length {len(alpha)} incompatible with horizon {T}")
        return cls(T, 1, a.reshape(T, 1, 1), beta.reshape(T, 1), gamma.reshape(T, 1))


@dataclass
class PricePathSamples:
    """Multiplier trajectories along sampled scenarios.

    ``lambdas`` is (s, T, d); ``demands`` (s, T) keeps the matching observed
    demand values so that regression needs no further problem plumbing.
    """

    lambdas: np.ndarray
    demands: np.ndarray
    paths: list | None = None

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.demands = np.asarray(self.demands, dtype=float)
        if self.lambdas.ndim != 3:
            raise ValueError("lambdas must be (samples, T, d)")
        if self.demands.shape != self.lambdas.shape[:2]:
            raise ValueError("demands must be (samples, T)")


@dataclass
class RegressionResult:
    model: PriceModel
    residual: float               # total sum of squared deviations
    rank_deficient: list          # stages where the OLS system lost rank
    fitted: np.ndarray            # (s, T, d) fitted trajectories


def path_demands(paths, demand_coordinate):
    """(s, T) observed demand values d_0..d_{T-1} from noise paths."""
    out = []
    for p in paths:
        xi = p.realizations
        out.append(xi[:-1, demand_coordinate])
    return np.asarray(out, dtype=float)


def propagate_demands(model: PriceModel, demands):
    """Unroll the recursion along demand sequences; (s, T) -> (s, T, d)."""
    demands = np.atleast_2d(np.asarray(demands, dtype=float))
    s, T = demands.shape
    if T != model.horizon:
        raise ValueError(f"demand length {T} != horizon {model.horizon}")
    lam = np.empty((s, T, model.dim))
    lam[:, 0] = model.beta[0] * demands[:, 0, None] + model.gamma[0]
    for t in range(1, T):
        lam[:, t] = (
            lam[:, t - 1] @ model.alpha[t].T
            + model.beta[t] * demands[:, t, None]
            + model.gamma[t]
        )
    return lam


def propagate(model: PriceModel, path: NoisePath, demand_coordinate=0):
    """Multiplier trajectory lambda_0..lambda_{T-1} along one noise path."""
    d = path.realizations[: model.horizon, demand_coordinate]
    return propagate_demands(model, d[None, :])[0]


def support_range(model: PriceModel, noise, demand_coordinate=0, margin=0.1):
    """Interval hull of reachable multipliers, widened by ``margin``.

    Exact interval propagation of the recursion from the demand supports
    (zero-probability atoms ignored).  Returns (lo, hi) arrays of shape
    (T, d).  The hull is invariant under the recursion even after padding:
    padding scales widths about unchanged centers, and the recursion is
    affine.  Degenerate intervals stay degenerate, so the zero model yields
    single-point grids.
    """
    T, d = model.horizon, model.dim
    lo = np.empty((T, d))
    hi = np.empty((T, d))
    dmin = np.empty(T)
    dmax = np.empty(T)
    for t in range(T):
        w = np.asarray(noise.weights[t], dtype=float)
        dem = np.asarray(noise.atoms[t], dtype=float)[w > 0, demand_coordinate]
        dmin[t], dmax[t] = float(dem.min()), float(dem.max())
    for i in range(d):
        b = model.beta[0, i]
        ends = np.array([b * dmin[0], b * dmax[0]]) + model.gamma[0, i]
        lo[0, i], hi[0, i] = ends.min(), ends.max()
    for t in range(1, T):
        for i in range(d):
            acc_lo = model.gamma[t, i]
            acc_hi = model.gamma[t, i]
            for j in range(d):
                a = model.alpha[t, i, j]
                p1, p2 = a * lo[t - 1, j], a * hi[t - 1, j]
                acc_lo += min(p1, p2)
                acc_hi += max(p1, p2)
            b = model.beta[t, i]
            p1, p2 = b * dmin[t], b * dmax[t]
            acc_lo += min(p1, p2)
            acc_hi += max(p1, p2)
            lo[t, i], hi[t, i] = acc_lo, acc_hi
    width = hi - lo
    return lo - margin * width, hi + margin * width


def samples_from_paths(model: PriceModel, paths, demand_coordinate=0):
    """Propagate the model along each path and bundle the result."""
    demands = path_demands(paths, demand_coordinate)
    return PricePathSamples(
        lambdas=propagate_demands(model, demands), demands=demands, paths=list(paths)
    )


def regress(targets: PricePathSamples, paths=None) -> RegressionResult:
    """Project multiplier targets onto the autoregressive family.

    Sequential forward fit: (beta_0, gamma_0) by OLS on the stage-0 targets,
    then for each t >= 1 an OLS fit of (alpha_t, beta_t, gamma_t) with the
    *fitted* previous-stage values as regressors.  Rank-deficient stages
    (constant demand, degenerate predecessors) are solved in the
    minimum-norm sense and flagged.  The fitted trajectories satisfy the
    recursion exactly, so re-propagating the returned model over the same
    demands reproduces ``fitted`` bit for bit.
    """
    lam = targets.lambdas
    dem = targets.demands
    s, T, d = lam.shape
    alpha = np.zeros((T, d, d))
    beta = np.zeros((T, d))
    gamma = np.zeros((T, d))
    fitted = np.empty_like(lam)
    deficient = []
    total = 0.0

    A0 = np.column_stack([dem[:, 0], np.ones(s)])
    coef, rank = _lstsq(A0, lam[:, 0])
    if rank < A0.shape[1]:
        deficient.append(0)
    beta[0] = coef[0]
    gamma[0] = coef[1]
    fitted[:, 0] = A0 @ coef
    total += float(np.sum((fitted[:, 0] - lam[:, 0]) ** 2))

    for t in range(1, T):
        A = np.column_stack([fitted[:, t - 1], dem[:, t], np.ones(s)])
        coef, rank = _lstsq(A, lam[:, t])
        if rank < A.shape[1]:
            deficient.append(t)
        alpha[t] = coef[:d].T
        beta[t] = coef[d]
        gamma[t] = coef[d + 1]
        fitted[:, t] = A @ coef
        total += float(np.sum((fitted[:, t] - lam[:, t]) ** 2))

    model = PriceModel(T, d, alpha, beta, gamma)
    return RegressionResult(model=model, residual=total, rank_deficient=deficient, fitted=fitted)


def _lstsq(A, Y):
    coef, _, rank, _ = np.linalg.lstsq(A, Y, rcond=None)
    return coef, int(rank)


# ---------------------------------------------------------------------------
# Serialization: one row per time step, coefficients flattened row-major.


def write_price_model_csv(model: PriceModel, path):
    d = model.dim
    header = (
        ["t"]
        + [f"alpha_{i}_{j}" for i in range(d) for j in range(d)]
        + [f"beta_{i}" for i in range(d)]
        + [f"gamma_{i}" for i in range(d)]
    )
    rows = []
    for t in range(model.horizon):
        acell = [""] * (d * d) if t == 0 else [fmt(v) for v in model.alpha[t].ravel()]
        rows.append([t] + acell + [fmt(v) for v in model.beta[t]] + [fmt(v) for v in model.gamma[t]])
    write_rows(path, header, rows)


def read_price_model_csv(path) -> PriceModel:
    header, rows = read_rows(path)
    d = sum(1 for h in header if h.startswith("beta_"))
    T = len(rows)
    alpha = np.zeros((T, d, d))
    beta = np.zeros((T, d))
    gamma = np.zeros((T, d))
    for row in rows:
        t = int(row[0])
        cells = row[1:]
        if t > 0:
            alpha[t] = np.array([parse(c) for c in cells[: d * d]]).reshape(d, d)
        beta[t] = [parse(c) for c in cells[d * d : d * d + d]]
        gamma[t] = [parse(c) for c in cells[d * d + d :]]
    return PriceModel(T, d, alpha, beta, gamma)


# ---------------------------------------------------------------------------
# Extension hook


class MultiplierDynamics(abc.ABC):
    """Interface a parametric multiplier family must provide to plug into
    the coordination loop.  Only the autoregressive family ships."""

    @abc.abstractmethod
    def propagate(self, model, demands):
        """(s, T) demands -> (s, T, d) multipliers."""

    @abc.abstractmethod
    def support_range(self, model, noise, demand_coordinate, margin):
        """Reachable-interval hull (lo, hi), each (T, d)."""

    @abc.abstractmethod
    def regress(self, targets):
        """Project targets onto the family; returns a RegressionResult."""


class ArMultiplierDynamics(MultiplierDynamics):
    def propagate(self, model, demands):
        return propagate_demands(model, demands)

    def support_range(self, model, noise, demand_coordinate=0, margin=0.1):
        return support_range(model, noise, demand_coordinate, margin)

    def regress(self, targets):
        return regress(targets)

"""Batch front end: config in, deterministic CSV artifacts out.

Subcommands
-----------
``solve-joint``
    Exact DP on the joint state grid; writes the value/policy tables and
    prints the optimum.
``solve-dadp``
    Coordination loop; writes per-iteration diagnostics, price-model
    checkpoints (resumable) and the final unit policies.
``simulate``
    Roll a checkpointed price model out on fresh paths, restore coupling
    feasibility, write per-path trajectories.
``verify-prop1``
    Check the closed-form multiplier recursion of the quadratic family
    against an exact scenario-tree KKT solve.
``price-compare``
    Sampled multiplier paths from a checkpoint next to marginal prices
    extracted from joint value tables, on common paths.

Every run writes ``manifest.json`` into the output directory.  All CSV
output is byte-deterministic given (config, seed, version); wall-clock
times therefore live in a ``timings.csv`` sidecar and the ``wall_ms``
diagnostics column is a fixed 0 placeholder.

Exit codes: 0 success; 2 config/validation/artifact errors; 3 solver or
verification failures; 4 hypothesis failures.  Flags fall back to
``DADP_*`` environment variables (``--seed`` -> ``DADP_SEED``, etc.),
then to config values.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    build_problem,
    build_quadratic,
    config_hash,
    dadp_settings,
    joint_settings,
    load_config,
    validate_config,
)
from .coordination import (
    restore_feasible,
    run,
    simulate_iterate,
    solve_subproblems,
)
from .dp import (
    FeedbackPolicy,
    SolverError,
    SweepSolution,
    ValueFunction,
    joint_solve,
    read_solution_csv,
    regular_state_grids,
    simulate_joint,
    uniform_mesh,
    write_solution_csv,
)
from .ioutil import fmt, write_rows
from .model import DadpError, ValidationError, sample_paths, validate
from .prices import (
    PriceModel,
    path_demands,
    propagate_demands,
    read_price_model_csv,
    write_price_model_csv,
)
from .quadratic import (
    KKT_VARIABLE_CAP,
    HypothesisError,
    ScenarioTree,
    verify_proposition,
    warm_start,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_HYPOTHESIS = 4

DIAGNOSTICS_COLUMNS = [
    "iter", "dual", "dual_se", "primal", "primal_se",
    "viol_rms_mean", "delta_lambda", "regress_residual", "wall_ms",
]


# ---------------------------------------------------------------------------
# Run manifests


@dataclass
class RunManifest:
    """What ran, on what, and where the artifacts went."""

    subcommand: str
    config_path: str
    config_sha256: str
    seed: int | None
    version: str = __version__
    schema: str = "dadp-manifest-1"
    threads: int = 1
    outputs: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    started_utc: str = ""
    finished_utc: str = ""

    def write(self, out_dir):
        payload = {
            "schema": self.schema,
            "subcommand": self.subcommand,
            "config_path": self.config_path,
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "version": self.version,
            "threads": self.threads,
            "outputs": self.outputs,
            "results": self.results,
            "started_utc": self.started_utc,
            "finished_utc": self.finished_utc,
        }
        with open(Path(out_dir) / "manifest.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _utcnow():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _start_manifest(args, subcommand, cfg_hash, seed):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(
        subcommand=subcommand,
        config_path=str(args.config),
        config_sha256=cfg_hash,
        seed=seed,
        threads=getattr(args, "threads", 1),
        started_utc=_utcnow(),
    )
    man.write(out)
    return man


def _finish_manifest(man, out_dir, outputs, results):
    man.outputs = outputs
    man.results = results
    man.finished_utc = _utcnow()
    man.write(out_dir)


# ---------------------------------------------------------------------------
# Shared plumbing


def _load(args):
    if not args.config:
        raise ConfigError("no config given (use --config or DADP_CONFIG)")
    cfg = load_config(args.config)
    validate_config(cfg)
    return cfg, config_hash(cfg)


def _env_int(name):
    raw = os.environ.get(name)
    return int(raw) if raw not in (None, "") else None


def _json_safe(value):
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    return value


def _read_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    with open(path) as fh:
        return json.load(fh)


def _check_artifact_hash(manifest, cfg_hash, where):
    have = manifest.get("config_sha256")
    if have != cfg_hash:
        raise ConfigError(
            f"checkpoint/config mismatch for {where}: artifact config hash "
            f"{have!r} != supplied config hash {cfg_hash!r}"
        )


def _resolve_price_model(path, cfg_hash):
    """A price-model CSV from either a file or a solve-dadp run directory.

    Run directories are hash-checked against the supplied config and yield
    the checkpoint of the best iterate.  A bare CSV is hash-checked only
    when a manifest sits next to it.
    """
    p = Path(path)
    if p.is_dir():
        man = _read_manifest(p)
        _check_artifact_hash(man, cfg_hash, str(p))
        best = man.get("results", {}).get("best_index")
        if best is None:
            raise ConfigError(f"run directory {p} has no recorded best iterate; did the run finish?")
        ck = p / "checkpoints" / f"price_model_{int(best):04d}.csv"
        if not ck.exists():
            raise FileNotFoundError(f"missing checkpoint {ck}")
        return read_price_model_csv(ck), str(ck)
    if not p.exists():
        raise FileNotFoundError(f"no such checkpoint: {p}")
    for parent in (p.parent, p.parent.parent):
        if (parent / "manifest.json").exists():
            _check_artifact_hash(_read_manifest(parent), cfg_hash, str(p))
            break
    return read_price_model_csv(p), str(p)


def _completed_iterations(diag_path):
    """Number of contiguous completed iterations recorded in a diagnostics CSV."""
    with open(diag_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DIAGNOSTICS_COLUMNS:
            raise ConfigError(f"unrecognized diagnostics header in {diag_path}")
        count = 0
        for row in reader:
            if int(row[0]) != count:
                raise ConfigError(f"diagnostics rows in {diag_path} are not contiguous from 0")
            count += 1
    return count


def _best_diagnostics_row(diag_path):
    """The row with the largest finite dual, across resumed segments too."""
    from .ioutil import parse

    with open(diag_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [row for row in reader]
    if not rows:
        raise ConfigError(f"no iterations recorded in {diag_path}")
    duals = np.array([parse(row[1]) for row in rows])
    finite = np.isfinite(duals)
    k = int(np.argmax(np.where(finite, duals, -np.inf))) if np.any(finite) else len(rows) - 1
    row = rows[k]
    return {name: parse(row[j]) if j else int(row[0]) for j, name in enumerate(DIAGNOSTICS_COLUMNS)}


# ---------------------------------------------------------------------------
# solve-joint


def cmd_solve_joint(args):
    cfg, h = _load(args)
    vp = validate(build_problem(cfg))
    js = joint_settings(cfg)
    if vp.total_state_dim > js["dim_cap"]:
        print(
            f"error: joint state dimension {vp.total_state_dim} exceeds joint.dim_cap "
            f"= {js['dim_cap']}; raise the config key to override",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    man = _start_manifest(args, "solve-joint", h, seed=None)
    out = Path(args.out_dir)
    grids = regular_state_grids(vp, js["state_grid"])
    mesh = uniform_mesh(vp, js["control_mesh"])
    sol = joint_solve(vp, grids, mesh, dim_cap=js["dim_cap"], eta=js["eta"])
    write_solution_csv(sol.sweep, out / "joint_solution.csv")
    print(f"joint optimum: {sol.optimal_cost!r}")
    _finish_manifest(
        man, out,
        outputs={"solution": "joint_solution.csv", "grids": "joint_solution.grid.csv"},
        results={"optimum": sol.optimal_cost},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve-dadp


def cmd_solve_dadp(args):
    cfg, h = _load(args)
    vp = validate(build_problem(cfg))
    overrides = {"seed": args.seed, "max_iters": args.max_iters, "sample_count": args.samples}
    dc = dadp_settings(cfg, **{k: v for k, v in overrides.items() if v is not None})
    out = Path(args.out_dir)
    ck_dir = out / "checkpoints"
    diag = out / "diagnostics.csv"

    start = 0
    model = None
    resuming = (out / "manifest.json").exists() and diag.exists() and ck_dir.is_dir()
    if resuming:
        prev = _read_manifest(out)
        _check_artifact_hash(prev, h, str(out))
        start = _completed_iterations(diag)
        ckpt = ck_dir / f"price_model_{start:04d}.csv"
        if not ckpt.exists():
            raise ConfigError(f"cannot resume: missing checkpoint {ckpt}")
        if start >= dc.max_iters or prev.get("results", {}).get("termination") == "tolerance":
            print(f"run already complete ({start} iterations recorded in {diag})")
            return EXIT_OK
        model = read_price_model_csv(ckpt)
        print(f"resuming at iteration {start} from {ckpt.name}")
    man = _start_manifest(args, "solve-dadp", h, seed=dc.seed)
    if not resuming:
        ck_dir.mkdir(parents=True, exist_ok=True)
        if "quadratic" in cfg and cfg["quadratic"].get("warm_start"):
            model = warm_start(build_quadratic(cfg), seed=dc.seed)
        else:
            model = PriceModel.zero(vp.T, vp.spec.coupling_dim)
        write_price_model_csv(model, ck_dir / "price_model_0000.csv")

    mode = "a" if resuming else "w"
    fdiag = open(diag, mode, newline="")
    ftime = open(out / "timings.csv", mode, newline="")
    fviol = open(out / "violations.csv", mode, newline="")
    wdiag = csv.writer(fdiag, lineterminator="\n")
    wtime = csv.writer(ftime, lineterminator="\n")
    wviol = csv.writer(fviol, lineterminator="\n")
    if not resuming:
        wdiag.writerow(DIAGNOSTICS_COLUMNS)
        wtime.writerow(["iter", "wall_ms"])
        wviol.writerow(["iter", "t", "viol_rms"])

    def checkpoint(it):
        # flush row-by-row so an aborted run keeps a usable partial CSV
        wdiag.writerow([
            it.index, fmt(it.dual), fmt(it.dual_stderr), fmt(it.primal),
            fmt(it.primal_stderr), fmt(float(np.mean(it.violation_rms))),
            fmt(it.delta_lambda), fmt(it.regression_residual), 0,
        ])
        fdiag.flush()
        wtime.writerow([it.index, fmt(it.wall_seconds * 1000.0)])
        ftime.flush()
        for t, v in enumerate(it.violation_rms):
            wviol.writerow([it.index, t, fmt(float(v))])
        fviol.flush()
        write_price_model_csv(it.next_model, ck_dir / f"price_model_{it.index + 1:04d}.csv")
        primal = "" if np.isnan(it.primal) else f"{it.primal:.6f}"
        print(
            f"[{it.index:4d}] dual={it.dual:.6f} primal={primal} "
            f"viol_rms={float(np.mean(it.violation_rms)):.4f} dlam={it.delta_lambda:.6f}"
        )

    try:
        res = run(
            vp, dc,
            initial_model=model,
            threads=args.threads,
            callback=checkpoint,
            start_iteration=start,
        )
    finally:
        fdiag.close()
        ftime.close()
        fviol.close()

    outputs = {
        "diagnostics": "diagnostics.csv",
        "timings": "timings.csv",
        "violations": "violations.csv",
        "checkpoints": "checkpoints",
    }
    for i, sol in enumerate(res.solutions):
        name = f"policy_unit{i}.csv"
        write_solution_csv(sol.sweep, out / name)
        outputs[f"policy_unit{i}"] = name
    best = _best_diagnostics_row(diag)   # overall best, prior segments included
    results = {
        "termination": res.termination,
        "iterations": res.final.index + 1,
        "best_index": best["iter"],
        "best_dual": _json_safe(best["dual"]),
        "best_dual_se": _json_safe(best["dual_se"]),
        "best_primal": _json_safe(best["primal"]),
        "best_primal_se": _json_safe(best["primal_se"]),
        "final_delta_lambda": _json_safe(res.final.delta_lambda),
    }
    _finish_manifest(man, out, outputs, results)
    print(
        f"{res.termination} after iteration {res.final.index}; best dual "
        f"{best['dual']:.6f} +- {best['dual_se']:.6f} at iteration {best['iter']}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _trajectory_header(vp):
    cols = ["path", "t"]
    for i, unit in enumerate(vp.subsystems):
        tag = unit.name or f"unit{i}"
        for k in range(unit.state_dim):
            cols.append(f"x_{tag}" if unit.state_dim == 1 else f"x_{tag}_{k}")
    for i, unit in enumerate(vp.subsystems):
        tag = unit.name or f"unit{i}"
        for k in range(unit.control_dim):
            cols.append(f"u_{tag}" if unit.control_dim == 1 else f"u_{tag}_{k}")
    d = vp.spec.coupling_dim
    cols += ["lambda"] if d == 1 else [f"lambda_{j}" for j in range(d)]
    cols += ["residual"] if d == 1 else [f"residual_{j}" for j in range(d)]
    cols.append("cost")
    return cols


def cmd_simulate(args):
    cfg, h = _load(args)
    vp = validate(build_problem(cfg))
    model, source = _resolve_price_model(args.checkpoint, h)
    if model.horizon != vp.T or model.dim != vp.spec.coupling_dim:
        raise ConfigError(
            f"checkpoint {source} has horizon/dim ({model.horizon}, {model.dim}), "
            f"config needs ({vp.T}, {vp.spec.coupling_dim})"
        )
    dc = dadp_settings(cfg, **({"seed": args.seed} if args.seed is not None else {}))
    n = args.samples if args.samples is not None else dc.sample_count
    man = _start_manifest(args, "simulate", h, seed=dc.seed)
    out = Path(args.out_dir)
    header = _trajectory_header(vp)
    traj_path = out / "trajectories.csv"

    if n == 0:
        write_rows(traj_path, header, [])
        _finish_manifest(man, out, {"trajectories": "trajectories.csv"},
                         {"paths": 0, "checkpoint": source})
        print("0 paths requested; wrote header only")
        return EXIT_OK

    solutions = solve_subproblems(vp, model, dc, threads=args.threads)
    paths = sample_paths(vp.spec.noise, dc.seed, n)
    record = simulate_iterate(vp, solutions, paths)
    restored = restore_feasible(vp, record)

    T = vp.T
    d = vp.spec.coupling_dim
    rows = []
    for p in range(n):
        for t in range(T):
            row = [p, t]
            for i in range(vp.n_units):
                row += [fmt(v) for v in restored.states[i][p, t]]
            for i in range(vp.n_units):
                row += [fmt(v) for v in restored.controls[i][p, t]]
            row += [fmt(v) for v in record.lambdas[p, t]]
            row += [fmt(v) for v in restored.residuals[p, t]]
            row.append(fmt(sum(float(restored.stage_costs[i][p, t]) for i in range(vp.n_units))))
            rows.append(row)
        row = [p, T]
        for i in range(vp.n_units):
            row += [fmt(v) for v in restored.states[i][p, T]]
        row += [""] * (sum(u.control_dim for u in vp.subsystems) + 2 * d)
        row.append(fmt(sum(float(restored.terminal_costs[i][p]) for i in range(vp.n_units))))
        rows.append(row)
    write_rows(traj_path, header, rows)

    total = restored.total_costs()
    mean = float(np.mean(total))
    se = float(np.std(total, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    viol = np.sqrt(np.mean(np.sum(restored.residuals**2, axis=2) / d, axis=0))
    print(f"simulated {n} paths from {source}")
    if not restored.defined:
        print("warning: no slack unit and paths are not coupling-feasible; costs are for the raw decomposition")
    print(f"mean cost: {mean:.6f} +- {se:.6f}")
    print(
        f"violation rms: mean {float(np.mean(viol)):.3e}, max {float(np.max(viol)):.3e}; "
        f"clamped slack steps: {restored.clamp_count}"
    )
    _finish_manifest(
        man, out,
        {"trajectories": "trajectories.csv"},
        {
            "paths": n,
            "checkpoint": source,
            "feasible": bool(restored.defined),
            "mean_cost": _json_safe(mean),
            "mean_cost_se": _json_safe(se),
            "violation_rms_mean": _json_safe(float(np.mean(viol))),
            "clamp_count": restored.clamp_count,
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify-prop1


def cmd_verify_prop1(args):
    cfg, h = _load(args)
    if "quadratic" not in cfg:
        raise ConfigError("verify-prop1 needs a config.quadratic section")
    spec = build_quadratic(cfg)
    root = int(cfg["quadratic"].get("root_atom", 0))
    tree = ScenarioTree.build(spec.noise, root)
    nv = tree.variable_count(spec.n_units)
    if nv > KKT_VARIABLE_CAP:
        print(
            f"error: scenario tree needs {nv} variables, above the dense-solve "
            f"guard {KKT_VARIABLE_CAP}; shrink the horizon or the supports",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    man = _start_manifest(args, "verify-prop1", h, seed=None)
    out = Path(args.out_dir)
    report = verify_proposition(spec, tree)
    print(report.text())
    report.write_csv(out / "verification.csv")
    _finish_manifest(
        man, out,
        {"verification": "verification.csv"},
        {
            "passed": report.passed,
            "hypothesis_ok": report.hypothesis_ok,
            "max_deviation": _json_safe(report.max_deviation),
            "kkt_residual": _json_safe(report.kkt_residual),
            "tolerance": report.tolerance,
            "tree_variables": nv,
        },
    )
    if not report.hypothesis_ok:
        return EXIT_HYPOTHESIS
    return EXIT_OK if report.passed else EXIT_SOLVER


# ---------------------------------------------------------------------------
# price-compare


def _sweep_from_artifact(path, vp, js):
    """Rebuild a coupled SweepSolution from serialized tables.

    Grids and values come from the artifact; the control mesh is not
    serialized and is rebuilt from the config, which is what produced the
    artifact in the first place.
    """
    data = read_solution_csv(path)
    grids = data["grids"]
    T = vp.T
    if len(grids) != T + 1:
        raise ConfigError(f"joint artifact {path} has {len(grids) - 1} stages, config has {T}")
    vfs = [ValueFunction(t, grids[t], data["values"][t]) for t in range(T + 1)]
    conditioned = list(data["conditioned"]) + [data["values"][T].reshape(1, -1)]
    policy = FeedbackPolicy(
        horizon=T,
        tables=data["tables"],
        target_values=data["targets"],
        atom_to_row=[vp.atom_to_obs[t] for t in range(T)],
        grids=grids,
    )
    return SweepSolution(
        value_functions=vfs,
        conditioned=conditioned,
        policy=policy,
        grids=grids,
        mesh=uniform_mesh(vp, js["control_mesh"]),
        coupled=True,
    )


def _expected_stage_marginal(vp, i, x_i, u, t, delta=1e-4):
    """E over next-step atoms of d(stage cost)/du for unit i's scalar control."""
    unit = vp.subsystems[i]
    atoms = vp.atoms(t + 1)
    weights = vp.weights(t + 1)
    up = u.copy(); up[:, 0] += delta
    um = u.copy(); um[:, 0] -= delta
    out = np.zeros(len(u))
    for a, w in zip(atoms, weights):
        if w == 0:
            continue
        xi = np.broadcast_to(a, (len(u), len(a)))
        cp = np.asarray(unit.stage_cost(x_i, up, xi, t), dtype=float)
        cm = np.asarray(unit.stage_cost(x_i, um, xi, t), dtype=float)
        out += w * (cp - cm)
    return out / (2 * delta)


def _dp_price_paths(vp, sweep, paths, js):
    """Marginal prices along simulated joint trajectories.

    The decomposition dualizes the coupling as ``cost + lambda . g`` with g
    the production contribution, so at an interior optimum
    ``lambda = dV/dx_i - d(stage cost)/du_i`` for every storage unit
    (stationarity in u_i plus the envelope identity dV_t/dx = E dV_{t+1}/dx;
    with this orientation the multipliers come out as the negatives of the
    usual marginal production prices).  At each visited state the price is a
    central difference of the conditioned value table along the unit's state
    coordinate (one grid step wide) minus the unit's expected stage marginal,
    averaged over units whose probes stay interior.  Steps where a probe leaves the hull or the
    unit's control sits on a bound fall back to the remaining units; if
    none remain, a one-sided difference is used.  All such events are
    returned for reporting, not smoothed away.
    """
    traj = simulate_joint(vp, sweep, paths, eta=js["eta"])
    s = len(paths)
    T = vp.T
    atoms_idx = np.stack([p.atom_indices for p in paths])
    lam = np.zeros((s, T))
    fallback = np.zeros((s, T), dtype=bool)   # no unit gave interior evidence
    near_bound = []   # (path, t, unit, what)
    scalar_dims = [
        (i, vp.state_slices[i].start + k)
        for i in range(vp.n_units)
        for k in range(vp.subsystems[i].state_dim)
    ]
    if not scalar_dims:
        raise ConfigError("price extraction needs at least one stateful unit")
    for t in range(T):
        rows = vp.atom_to_obs[t][atoms_idx[:, t]] if vp.atom_to_obs[t] is not None else np.zeros(s, dtype=int)
        grid = sweep.grids[t]
        X = traj.states[:, t]
        per_unit = np.full((len(scalar_dims), s), np.nan)
        usable = np.zeros((len(scalar_dims), s), dtype=bool)
        one_sided = np.full((len(scalar_dims), s), np.nan)
        for j, (i, dim) in enumerate(scalar_dims):
            levels = grid.levels[dim]
            if len(levels) < 2:
                continue
            hstep = float(np.min(np.diff(levels)))
            u_i = traj.controls[:, t, vp.control_slices[i]]
            lo_u = vp.subsystems[i].control_lower[t]
            hi_u = vp.subsystems[i].control_upper[t]
            marg = _expected_stage_marginal(vp, i, X[:, vp.state_slices[i]], u_i.copy(), t)
            at_bound = np.any(
                (np.abs(u_i - lo_u) <= 1e-9) | (np.abs(u_i - hi_u) <= 1e-9), axis=1
            ) & np.any(hi_u > lo_u)
            Xp = X.copy(); Xp[:, dim] += hstep
            Xm = X.copy(); Xm[:, dim] -= hstep
            in_hull = (Xp[:, dim] <= levels[-1] + 1e-9) & (Xm[:, dim] >= levels[0] - 1e-9)
            for r in np.unique(rows):
                sel = rows == r
                vf = ValueFunction(t, grid, sweep.conditioned[t][r])
                ok = sel & in_hull
                if np.any(ok):
                    vp_vals = vf(Xp[ok])
                    vm_vals = vf(Xm[ok])
                    per_unit[j, ok] = (vp_vals - vm_vals) / (2 * hstep) - marg[ok]
                low = sel & ~in_hull
                if np.any(low):
                    # one-sided difference for states a step from the hull edge
                    up_ok = Xp[low, dim] <= levels[-1] + 1e-9
                    base = vf(X[low])
                    probe = np.where(up_ok[:, None], Xp[low], Xm[low])
                    sign = np.where(up_ok, 1.0, -1.0)
                    one_sided[j, low] = sign * (vf(probe) - base) / hstep - marg[low]
            usable[j] = in_hull & ~at_bound & np.isfinite(per_unit[j])
            for p in np.nonzero(~in_hull)[0]:
                near_bound.append((int(p), int(t), int(i), "state"))
            for p in np.nonzero(in_hull & at_bound)[0]:
                near_bound.append((int(p), int(t), int(i), "control"))
        counts = usable.sum(axis=0)
        good = counts > 0
        with np.errstate(invalid="ignore"):
            lam[good, t] = np.nansum(np.where(usable, per_unit, 0.0), axis=0)[good] / counts[good]
        if np.any(~good):
            # last resort: average whatever estimate exists, one-sided included
            est = np.vstack([per_unit, one_sided])
            lam[~good, t] = np.nanmean(est[:, ~good], axis=0)
            fallback[~good, t] = True
    if np.any(np.isnan(lam)):
        raise SolverError("marginal-price extraction produced NaN; artifact and config disagree?")
    return lam, near_bound, fallback


def _lambda_paths(artifact, cfg, cfg_hash, vp, js, paths):
    """Dispatch one artifact to its price-path extraction.

    Price-model artifacts (solve-dadp runs or price_model CSVs) propagate
    the multiplier recursion along the sampled demands; joint artifacts
    (solve-joint runs or solution CSVs) are simulated and differenced.
    Returns (lambdas (s, T), near_bound list, fallback (s, T), kind).
    """
    p = Path(artifact)
    dc_coord = vp.spec.demand_coordinate
    no_fallback = np.zeros((len(paths), vp.T), dtype=bool)
    if p.is_dir():
        man = _read_manifest(p)
        if man.get("subcommand") == "solve-joint":
            _check_artifact_hash(man, cfg_hash, str(p))
            sweep = _sweep_from_artifact(p / "joint_solution.csv", vp, js)
            lam, nb, fb = _dp_price_paths(vp, sweep, paths, js)
            return lam, nb, fb, "joint"
        model, _ = _resolve_price_model(p, cfg_hash)
        lam = propagate_demands(model, path_demands(paths, dc_coord))
        return lam[:, :, 0], [], no_fallback, "prices"
    if not p.exists():
        raise FileNotFoundError(f"no such artifact: {p}")
    with open(p, newline="") as fh:
        header = fh.readline().strip().split(",")
    if header[:2] == ["t", "obs"]:
        sweep = _sweep_from_artifact(p, vp, js)
        lam, nb, fb = _dp_price_paths(vp, sweep, paths, js)
        return lam, nb, fb, "joint"
    model, _ = _resolve_price_model(p, cfg_hash)
    lam = propagate_demands(model, path_demands(paths, dc_coord))
    return lam[:, :, 0], [], no_fallback, "prices"


def cmd_price_compare(args):
    cfg, h = _load(args)
    vp = validate(build_problem(cfg))
    if vp.spec.coupling_dim != 1:
        raise ConfigError("price-compare handles scalar couplings only")
    js = joint_settings(cfg)
    dc = dadp_settings(cfg, **({"seed": args.seed} if args.seed is not None else {}))
    n = args.samples if args.samples is not None else 100
    man = _start_manifest(args, "price-compare", h, seed=dc.seed)
    out = Path(args.out_dir)
    paths = sample_paths(vp.spec.noise, dc.seed, n)
    lam_a, nb_a, fb_a, kind_a = _lambda_paths(args.prices, cfg, h, vp, js, paths)
    lam_b, nb_b, fb_b, kind_b = _lambda_paths(args.joint, cfg, h, vp, js, paths)

    T = vp.T
    rows = []
    for p in range(n):
        for t in range(T):
            rows.append([p, t, fmt(lam_a[p, t]), fmt(lam_b[p, t])])
    write_rows(out / "price_compare.csv", ["path", "t", "lambda_dadp", "lambda_dp"], rows)
    near = sorted(set(nb_a) | set(nb_b))
    write_rows(
        out / "near_bound.csv",
        ["path", "t", "unit", "what"],
        [[p, t, i, w] for (p, t, i, w) in near],
    )

    # a step only counts as non-interior when no unit gave interior evidence
    flagged = fb_a | fb_b
    diff = lam_a - lam_b
    rms_all = float(np.sqrt(np.mean(diff**2)))
    scale = float(np.sqrt(np.mean(lam_b**2)))
    interior = ~flagged
    if np.any(interior):
        rms_int = float(np.sqrt(np.mean(diff[interior] ** 2)))
        scale_int = float(np.sqrt(np.mean(lam_b[interior] ** 2)))
    else:
        rms_int, scale_int = float("nan"), float("nan")
    print(f"compared {n} paths x {T} steps ({kind_a} vs {kind_b})")
    print(f"rms gap: {rms_all:.6f} (relative {rms_all / scale if scale else float('nan'):.4f})")
    print(
        f"interior steps: {int(interior.sum())}/{n * T}, rms gap {rms_int:.6f} "
        f"(relative {rms_int / scale_int if scale_int else float('nan'):.4f})"
    )
    print(f"near-bound step reports: {len(near)} (see near_bound.csv)")
    _finish_manifest(
        man, out,
        {"comparison": "price_compare.csv", "near_bound": "near_bound.csv"},
        {
            "paths": n,
            "rms_gap": _json_safe(rms_all),
            "rms_gap_relative": _json_safe(rms_all / scale if scale else float("nan")),
            "interior_rms_gap": _json_safe(rms_int),
            "interior_rms_gap_relative": _json_safe(rms_int / scale_int if scale_int else float("nan")),
            "interior_steps": int(interior.sum()),
            "near_bound_reports": len(near),
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry points


def _add_common(p, *, samples_default=None):
    p.add_argument("--config", default=os.environ.get("DADP_CONFIG"),
                   help="config JSON path (env DADP_CONFIG)")
    p.add_argument("--seed", type=int, default=_env_int("DADP_SEED"),
                   help="override the config seed (env DADP_SEED)")
    p.add_argument("--out-dir", default=os.environ.get("DADP_OUT_DIR", "dadp-out"),
                   help="artifact directory (env DADP_OUT_DIR, default dadp-out)")
    p.add_argument("--threads", type=int, default=_env_int("DADP_THREADS") or 1,
                   help="worker threads for per-unit solves (env DADP_THREADS)")
    p.add_argument("--max-iters", type=int, default=_env_int("DADP_MAX_ITERS"),
                   help="override the iteration cap (env DADP_MAX_ITERS)")
    p.add_argument("--samples", type=int, default=_env_int("DADP_SAMPLES"),
                   help="override the path count (env DADP_SAMPLES)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dadp",
        description="price decomposition of coupled stochastic control problems",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-joint", help="exact DP on the joint state grid")
    _add_common(p)
    p.set_defaults(func=cmd_solve_joint)

    p = sub.add_parser("solve-dadp", help="run the price coordination loop")
    _add_common(p)
    p.set_defaults(func=cmd_solve_dadp)

    p = sub.add_parser("simulate", help="simulate a checkpointed price model")
    p.add_argument("checkpoint", help="solve-dadp run directory or price-model CSV")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-prop1", help="closed-form multipliers vs a KKT solve")
    _add_common(p)
    p.set_defaults(func=cmd_verify_prop1)

    p = sub.add_parser("price-compare", help="multiplier paths vs joint marginal prices")
    p.add_argument("prices", help="solve-dadp run directory or price-model CSV")
    p.add_argument("joint", help="solve-joint run directory or solution CSV")
    _add_common(p)
    p.set_defaults(func=cmd_price_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except DadpError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

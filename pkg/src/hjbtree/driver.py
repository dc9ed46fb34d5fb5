"""Experiment driver: offline basis construction, online reduced-tree
dynamic programming, pruning studies and bound verification.

Artifacts land in the configured output directory: a versioned basis
container, per-level tree statistics and trajectories as CSV, summaries
and bound reports as JSON.  Summaries contain no wall-clock data, so
reruns of one configuration are bit-identical; timings go to a plain log
file next to them.
"""

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import compute_budget, projection_residuals, verify_state_bound, \
    verify_value_bound
from .dynamics import IntegratorConfig, SemiImplicitStepper, ShiftedSolver
from .errors import CapExceeded, ConfigError
from .problems import OdeModel, build_problem
from .reduction import HoDeim, HoPod, load_reduction, node_codec, reduce_model, \
    reduce_system, save_reduction
from .tree import (
    ControlGrid,
    GeometricPruning,
    MonotoneControls,
    backward_values,
    bilinear_tree,
    build_tree,
    export_level_stats,
    export_trajectory,
    monotone_cardinality,
    optimal_trajectory,
    statistical_loop,
    sum_based_bound,
)

logger = logging.getLogger("hjbtree")

__all__ = ["OfflineResult", "OnlineResult", "run_offline", "run_online",
           "run_pruning_study", "run_verify"]


def _components(model):
    return model.components if hasattr(model, "components") else [model]


def _is_system(model):
    return hasattr(model, "components")


def _out_dir(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _log_timing(out, label, seconds):
    with open(out / "timings.log", "a") as fh:
        fh.write(f"{label}: {seconds:.3f} s\n")


@dataclass
class OfflineResult:
    problem: object
    bases: list
    deims: list
    tree: object
    summary: dict
    basis_path: Path


@dataclass
class OnlineResult:
    problem: object
    tree: object
    trajectory: object
    summary: dict
    history: list | None = None


# ------------------------------------------------------------------ offline


def run_offline(cfg):
    """Coarse full-order phase: tree walk, snapshot harvest, basis build.

    Every retained node is tested for snapshot inclusion; accepted states
    update the mode-wise basis accumulators and contribute one
    nonlinearity snapshot per offline control.  Nodes are stored in
    rank-capped low-rank form and only the previous level stays live.
    """
    t_start = time.perf_counter()
    problem = build_problem(cfg.preset, **cfg.problem_params)
    model = problem.model
    if isinstance(model, OdeModel):
        raise ConfigError(
            f"preset {cfg.preset!r} has no reduction path; run 'online' or "
            "'study' directly"
        )
    out = _out_dir(cfg)
    dt = cfg.offline.dt or problem.dt
    steps = IntegratorConfig(dt, problem.t0, problem.horizon).n_steps
    controls = cfg.offline_controls(problem)
    comps = _components(model)
    kappa = cfg.offline.max_rank
    pods = [HoPod(kappa, cfg.offline.trunc_tol, cfg.offline.snapshot_tol)
            for _ in comps]
    deims = [
        HoDeim(kappa, cfg.offline.trunc_tol, cfg.offline.snapshot_tol)
        if c.nonlinear is not None else None
        for c in comps
    ]
    included = [0] * len(comps)

    def harvest(level, t, state):
        states = model.unpack(state) if _is_system(model) else [state]
        for i, Y in enumerate(states):
            if not pods[i].consider(Y):
                continue
            included[i] += 1
            if deims[i] is None:
                continue
            for u in controls:
                if _is_system(model):
                    fval = model.nonlinear_value(states, u, t, i)
                else:
                    fval = comps[i].nonlinear_value(Y, u, t)
                deims[i].partial_fit(fval)

    x0 = problem.pack_initial()
    cost = problem.cost
    if cfg.offline.pruning == "bilinear":
        if not problem.bilinear or _is_system(model):
            raise ConfigError("bilinear offline pruning needs a bilinear scalar model")
        solver = ShiftedSolver(model.lin_mats, dt)
        tree = bilinear_tree(solver, x0, ControlGrid(np.asarray(controls)), steps,
                             dt, t0=problem.t0, state_cost=cost.state_cost,
                             on_node=harvest, materialize=False)
    else:
        pruning = None
        if cfg.offline.pruning == "geometric":
            pruning = GeometricPruning(eps=cfg.offline.eps_scale * dt**2)
        stepper = problem.stepper(dt)
        encode, decode, size = node_codec(model, kappa)
        try:
            tree = build_tree(
                x0, stepper, np.asarray(controls), steps, dt, t0=problem.t0,
                pruning=pruning, state_cost=cost.state_cost, on_node=harvest,
                encode=encode, decode=decode, size=size,
                node_cap=cfg.offline.node_cap, keep="last",
            )
        except CapExceeded:
            summary = {"phase": "offline", "preset": cfg.preset, "partial": True,
                       "snapshots_included": included}
            _write_json(out / "offline_summary.json", summary)
            raise

    for pod in pods:
        pod.finalize()
    for deim in deims:
        if deim is not None:
            deim.finalize()

    basis_path = out / "basis.npz"
    meta = {"problem": problem.to_dict(),
            "offline": {"dt": dt, "controls": controls,
                        "snapshot_tol": cfg.offline.snapshot_tol,
                        "trunc_tol": cfg.offline.trunc_tol,
                        "max_rank": kappa, "pruning": cfg.offline.pruning}}
    save_reduction(basis_path, pods, deims, meta=meta)
    export_level_stats(tree, out / "offline_levels.csv")

    summary = {
        "phase": "offline",
        "partial": False,
        "preset": cfg.preset,
        "dt": dt,
        "n_steps": steps,
        "controls": controls,
        "n_nodes": tree.n_nodes(),
        "level_sizes": tree.level_sizes(),
        "peak_node_storage": tree.peak_storage,
        "snapshots_included": included,
        "basis_ranks": [list(p.ranks_) for p in pods],
        "interp_ranks": [list(d.ranks_) if d is not None else None for d in deims],
        "growth_consts": [d.growth_const_ if d is not None else None for d in deims],
        "basis_file": basis_path.name,
    }
    _write_json(out / "offline_summary.json", summary)
    _log_timing(out, "offline", time.perf_counter() - t_start)
    return OfflineResult(problem, pods, deims, tree, summary, basis_path)


# ------------------------------------------------------------------- online


def _load_artifacts(cfg, problem, artifacts):
    if artifacts is not None:
        return artifacts.bases, artifacts.deims
    basis_path = Path(cfg.out_dir) / "basis.npz"
    if not basis_path.exists():
        raise ConfigError(
            f"no offline artifacts at {basis_path}; run the offline phase first"
        )
    bases, deims, meta = load_reduction(basis_path)
    stored = meta.get("problem", {}).get("preset")
    if stored is not None and stored != problem.name:
        raise ConfigError(
            f"basis container was built for preset {stored!r}, not {problem.name!r}"
        )
    return bases, deims


def _reduced_setup(cfg, problem, artifacts, dt):
    """Reduced model, stepper and projected initial state for the online phase."""
    model = problem.model
    if isinstance(model, OdeModel):
        return None, problem.stepper(dt), problem.pack_initial()
    bases, deims = _load_artifacts(cfg, problem, artifacts)
    if _is_system(model):
        reduced = reduce_system(model, bases, deims)
        x0 = reduced.project(model.unpack(problem.pack_initial()))
    else:
        reduced = reduce_model(model, bases[0], deims[0])
        x0 = reduced.project(problem.pack_initial())
    return reduced, SemiImplicitStepper(reduced, dt), x0


def _lift_states(problem, reduced, states):
    if reduced is None or states is None:
        return states
    model = problem.model
    if _is_system(model):
        return [model.pack(reduced.lift(s)) for s in states]
    return [reduced.lift(s) for s in states]


def run_online(cfg, artifacts=None):
    """Reduced phase: wider control grid, pruned tree, value function,
    optimal trajectory, exports."""
    t_start = time.perf_counter()
    problem = build_problem(cfg.preset, **cfg.problem_params)
    out = _out_dir(cfg)
    if cfg.offline is not None:
        dt_off, dt = cfg.validate_phases(problem)
    else:
        dt = cfg.online.dt or problem.dt
    steps = IntegratorConfig(dt, problem.t0, problem.horizon).n_steps
    grid = ControlGrid.from_box(*problem.control_box, cfg.online.n_controls)
    cost = problem.cost
    reduced, stepper, x0 = _reduced_setup(cfg, problem, artifacts, dt)

    history = counts = None
    rule = cfg.online.pruning
    if rule == "statistical":
        tree, history, counts = statistical_loop(
            x0, stepper, problem.control_box, steps, dt,
            running_cost=cost.running, terminal_cost=cost.terminal,
            state_cost=cost.state_cost, m0=cfg.online.m0, rho=cfg.online.rho,
            n_start=cfg.online.n_start, tol=cfg.online.tol,
            k_max=cfg.online.k_max, t0=problem.t0,
            node_cap=cfg.online.node_cap,
        )
        grid = tree.controls
    elif rule == "bilinear":
        if not problem.bilinear or _is_system(problem.model):
            raise ConfigError("bilinear pruning needs a bilinear scalar model")
        mats = reduced.lin_mats if reduced is not None else problem.model.lin_mats
        solver = ShiftedSolver(mats, dt)
        tree = bilinear_tree(solver, x0, grid, steps, dt, t0=problem.t0,
                             state_cost=cost.state_cost)
        backward_values(tree, cost.running, cost.terminal)
    else:
        pruning = None
        if rule == "geometric":
            pruning = GeometricPruning(eps=cfg.online.eps_scale * dt**2)
        elif rule == "monotone":
            pruning = MonotoneControls()
        tree = build_tree(x0, stepper, grid, steps, dt, t0=problem.t0,
                          pruning=pruning, state_cost=cost.state_cost,
                          node_cap=cfg.online.node_cap)
        backward_values(tree, cost.running, cost.terminal)

    traj = optimal_trajectory(tree, cost.running, cost.terminal, step=stepper)
    lifted = _lift_states(problem, reduced, traj.states)

    # cost functional along the path and exports
    refs = []
    if lifted is not None:
        np.savez_compressed(out / "trajectory_states.npz",
                            **{f"t{k}": s for k, s in enumerate(lifted)})
        refs = [f"trajectory_states.npz:t{k}" for k in range(len(lifted))]
    export_trajectory(traj, out / "trajectory.csv", state_ref=refs or None)
    export_level_stats(tree, out / "online_levels.csv")
    _export_cost_curve(out / "cost_curve.csv", tree, traj, cost)

    summary = {
        "phase": "online",
        "preset": cfg.preset,
        "dt": dt,
        "n_steps": steps,
        "n_controls": len(grid),
        "pruning": rule,
        "value": tree.value,
        "trajectory_cost": traj.cost,
        "n_nodes": tree.n_nodes(),
        "level_sizes": tree.level_sizes(),
        "value_history": history,
        "control_counts": counts,
        "controls_on_path": [float(u) for u in traj.control_values],
    }
    if cfg.online.compare_full_order and reduced is not None:
        full_cost = _full_order_cost(problem, traj.control_values, dt)
        gap = abs(traj.cost - full_cost) / max(abs(full_cost), 1e-300)
        summary["full_order_cost"] = full_cost
        summary["relative_cost_gap"] = gap
    _write_json(out / "online_summary.json", summary)
    _log_timing(out, "online", time.perf_counter() - t_start)
    return OnlineResult(problem, tree, traj, summary, history)


def _full_order_cost(problem, control_values, dt):
    """Discrete cost of the full-order model driven by a fixed control path."""
    stepper = problem.stepper(dt)
    cost = problem.cost
    y = problem.pack_initial()
    total = 0.0
    for k, u in enumerate(control_values):
        total += dt * cost.running(cost.state_cost(y), float(u), problem.t0 + k * dt)
        y = stepper(y, float(u), problem.t0 + k * dt)
    return total + cost.terminal(cost.state_cost(y))


def _export_cost_curve(path, tree, traj, cost):
    import csv

    cumulative = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "control", "running_cost", "cumulative_cost"])
        for k, t in enumerate(traj.times):
            if k < len(traj.control_values):
                u = float(traj.control_values[k])
                node = int(traj.node_indices[k])
                q = float(tree.levels[k].node_cost[node])
                run = float(np.asarray(cost.running(q, u, float(t))))
                cumulative += tree.dt * run
                w.writerow([repr(float(t)), repr(u), repr(run), repr(cumulative)])
            else:
                node = int(traj.node_indices[k])
                q = float(tree.levels[k].node_cost[node])
                cumulative += float(np.asarray(cost.terminal(q)))
                w.writerow([repr(float(t)), "", repr(float(cost.terminal(q))),
                            repr(cumulative)])


# ----------------------------------------------------------- pruning study


def run_pruning_study(cfg, artifacts=None):
    """Parameter sweeps over pruning rules; one CSV per study kind."""
    import csv

    problem = build_problem(cfg.preset, **cfg.problem_params)
    out = _out_dir(cfg)
    kind = cfg.study.get("kind", "controls")
    dt = cfg.online.dt or problem.dt
    steps = IntegratorConfig(dt, problem.t0, problem.horizon).n_steps
    cost = problem.cost
    rows = []

    if kind == "monotone":
        limit = int(cfg.study.get("limit", 6))
        reduced, stepper, x0 = _reduced_setup(cfg, problem, artifacts, dt)
        for m in range(2, limit + 1):
            for n in range(1, limit + 1):
                grid = ControlGrid.from_box(*problem.control_box, m)
                tree = build_tree(x0, stepper, grid, n, dt, t0=problem.t0,
                                  pruning=MonotoneControls(),
                                  state_cost=cost.state_cost)
                backward_values(tree, cost.running, cost.terminal)
                rows.append([m, n, tree.n_nodes(), monotone_cardinality(m, n),
                             tree.value])
        header = ["n_controls", "n_steps", "nodes", "formula", "value"]
    elif kind == "bilinear":
        if not problem.bilinear:
            raise ConfigError("bilinear study needs a bilinear preset")
        reduced, _, x0 = _reduced_setup(cfg, problem, artifacts, dt)
        mats = reduced.lin_mats if reduced is not None else problem.model.lin_mats
        solver = ShiftedSolver(mats, dt)
        m = int(cfg.study.get("n_controls", 2))
        grid = ControlGrid.from_box(*problem.control_box, m)
        for n in cfg.study.get("steps", [5, 10, 20, 40]):
            tree = bilinear_tree(solver, x0, grid, int(n), dt, t0=problem.t0,
                                 state_cost=cost.state_cost)
            backward_values(tree, cost.running, cost.terminal)
            rows.append([m, int(n), tree.n_nodes(),
                         sum_based_bound(m, int(n) + 1), tree.value])
        header = ["n_controls", "n_steps", "nodes", "bound", "value"]
    elif kind == "geometric":
        reduced, stepper, x0 = _reduced_setup(cfg, problem, artifacts, dt)
        grid = ControlGrid.from_box(*problem.control_box, cfg.online.n_controls)
        for scale in cfg.study.get("eps_scales", [0.25, 1.0, 4.0]):
            tree = build_tree(x0, stepper, grid, steps, dt, t0=problem.t0,
                              pruning=GeometricPruning(eps=float(scale) * dt**2),
                              state_cost=cost.state_cost,
                              node_cap=cfg.online.node_cap)
            backward_values(tree, cost.running, cost.terminal)
            rows.append([float(scale), float(scale) * dt**2, tree.n_nodes(),
                         tree.value])
        header = ["eps_scale", "eps", "nodes", "value"]
    elif kind == "controls":
        reduced, stepper, x0 = _reduced_setup(cfg, problem, artifacts, dt)
        pruning_name = cfg.study.get("pruning", cfg.online.pruning)
        for m in cfg.study.get("n_controls", [2, 3, 5, 7]):
            grid = ControlGrid.from_box(*problem.control_box, int(m))
            pruning = None
            if pruning_name == "geometric":
                pruning = GeometricPruning(eps=cfg.online.eps_scale * dt**2)
            elif pruning_name == "monotone":
                pruning = MonotoneControls()
            tree = build_tree(x0, stepper, grid, steps, dt, t0=problem.t0,
                              pruning=pruning, state_cost=cost.state_cost,
                              node_cap=cfg.online.node_cap)
            backward_values(tree, cost.running, cost.terminal)
            rows.append([int(m), tree.n_nodes(), int(m) ** steps, tree.value])
        header = ["n_controls", "nodes", "unpruned", "value"]
    elif kind == "statistical":
        reduced, stepper, x0 = _reduced_setup(cfg, problem, artifacts, dt)
        tree, history, counts = statistical_loop(
            x0, stepper, problem.control_box, steps, dt,
            running_cost=cost.running, terminal_cost=cost.terminal,
            state_cost=cost.state_cost, m0=cfg.online.m0, rho=cfg.online.rho,
            n_start=cfg.online.n_start, tol=cfg.online.tol,
            k_max=cfg.online.k_max, t0=problem.t0, node_cap=cfg.online.node_cap,
        )
        for k, (v, m) in enumerate(zip(history, counts)):
            rows.append([k, m, v])
        header = ["iteration", "n_controls", "value"]
    else:
        raise ConfigError(f"unknown study kind {kind!r}")

    path = out / f"study_{kind}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return {"kind": kind, "rows": rows, "csv": str(path)}


# ---------------------------------------------------------------- verify


def _leaf_paths(tree):
    """Node-index paths from the root to every leaf, leaves in index order."""
    paths = []
    for leaf in range(len(tree.levels[-1])):
        idx = [leaf]
        for n in range(tree.n_steps, 0, -1):
            idx.append(int(tree.levels[n].parent[idx[-1]]))
        paths.append(idx[::-1])
    return paths


def run_verify(cfg, artifacts=None):
    """Desk-scale a-posteriori verification of the error bounds.

    Builds matched full and reduced trees over the offline control set,
    checks the trajectory bound along every root-to-leaf control
    sequence, then the value bound at the root; bound reports go to JSON.
    A violated inequality is reported, not raised.
    """
    t_start = time.perf_counter()
    problem = build_problem(cfg.preset, **cfg.problem_params)
    model = problem.model
    if isinstance(model, OdeModel) or _is_system(model):
        raise ConfigError("bound verification supports scalar PDE models")
    if model.total_dim > cfg.analysis.dense_cap:
        raise ConfigError(
            f"verification is desk-scale only: total dimension {model.total_dim} "
            f"exceeds the cap {cfg.analysis.dense_cap}"
        )
    out = _out_dir(cfg)
    if artifacts is None:
        artifacts = run_offline(cfg)
    basis, deim = artifacts.bases[0], artifacts.deims[0]
    reduced = reduce_model(model, basis, deim)

    dt = cfg.offline.dt or problem.dt
    steps = IntegratorConfig(dt, problem.t0, problem.horizon).n_steps
    controls = np.asarray(cfg.offline_controls(problem))
    cost = problem.cost

    full_tree = build_tree(problem.pack_initial(), SemiImplicitStepper(model, dt),
                           controls, steps, dt, t0=problem.t0,
                           state_cost=cost.state_cost)
    red_tree = build_tree(basis.transform(problem.pack_initial()),
                          SemiImplicitStepper(reduced, dt), controls, steps, dt,
                          t0=problem.t0, state_cost=cost.state_cost)
    backward_values(full_tree, cost.running, cost.terminal)
    backward_values(red_tree, cost.running, cost.terminal)

    # Lipschitz input: problem metadata, config override, or estimate
    f_lip = cfg.analysis.f_lip
    sample_states = [s for lvl in full_tree.levels for s in lvl.states[:16]]
    budget = compute_budget(
        model, basis, deim, dt=dt, horizon=problem.horizon - problem.t0,
        f_lip=f_lip, trajectory_states=sample_states, controls=controls,
        dense_cap=cfg.analysis.dense_cap,
    )

    f_cache = {}

    def f_at(n, node, j):
        key = (n, node, j)
        if key not in f_cache:
            y = full_tree.levels[n].states[node]
            f_cache[key] = model.nonlinear_value(y, float(controls[j]),
                                                 full_tree.time(n))
        return f_cache[key]

    worst = None
    n_pass = 0
    paths = _leaf_paths(full_tree)
    for path in paths:
        full_states = [full_tree.levels[n].states[i] for n, i in enumerate(path)]
        red_states = [red_tree.levels[n].states[i] for n, i in enumerate(path)]
        f_values = []
        if model.nonlinear is not None:
            for n in range(steps):
                j = int(full_tree.levels[n + 1].control[path[n + 1]])
                f_values.append(f_at(n, path[n], j))
        report = verify_state_bound(full_states, red_states, f_values, basis,
                                    deim, budget)
        if report["passed"]:
            n_pass += 1
        if worst is None or report["slack_ratio"] > worst["slack_ratio"]:
            worst = report

    e_state_max = e_nonlin_max = 0.0
    for path in paths:
        full_states = [full_tree.levels[n].states[i] for n, i in enumerate(path)]
        f_values = []
        if model.nonlinear is not None:
            for n in range(steps):
                j = int(full_tree.levels[n + 1].control[path[n + 1]])
                f_values.append(f_at(n, path[n], j))
        e_s, e_f = projection_residuals(basis, deim, full_states, f_values)
        e_state_max = max(e_state_max, e_s)
        e_nonlin_max = max(e_nonlin_max, e_f)
    value_report = verify_value_bound(full_tree.value, red_tree.value,
                                      e_state_max, e_nonlin_max, budget)

    state_report = dict(worst)
    state_report.update({
        "paths_checked": len(paths),
        "paths_passed": n_pass,
        "all_passed": n_pass == len(paths),
    })
    _write_json(out / "state_bound.json", state_report)
    _write_json(out / "value_bound.json", value_report)
    _write_json(out / "budget.json", budget.to_dict())
    _log_timing(out, "verify", time.perf_counter() - t_start)
    return {
        "state_bound": state_report,
        "value_bound": value_report,
        "budget": budget.to_dict(),
        "full_value": full_tree.value,
        "reduced_value": red_tree.value,
    }

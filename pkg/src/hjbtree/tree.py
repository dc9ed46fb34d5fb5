"""Dynamic programming on trees of controlled trajectories.

A tree level holds the states reachable at one time step under every
admissible discrete control, with parent and control bookkeeping.  The
value function is computed by the backward comparison recursion

    V_n(node) = min_u [ V_{n+1}(child(node, u)) + dt * L(node, u, t_n) ]

seeded with the terminal cost on the last level, and the optimal
trajectory follows the stored minimizing indices.  Growth of the tree is
tamed by pruning rules: merging nearby nodes (geometric), restricting to
boxes where the previous value function was lowest (statistical),
admitting only nondecreasing control sequences (monotone), or exploiting
the exact node coincidence of bilinear dynamics (sum-based).
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, NumericalError

__all__ = [
    "ControlGrid",
    "GeometricPruning",
    "MonotoneControls",
    "StatisticalConstraint",
    "TreeLevel",
    "Tree",
    "build_tree",
    "backward_values",
    "optimal_trajectory",
    "Trajectory",
    "statistical_refine",
    "statistical_loop",
    "monotone_cardinality",
    "sum_based_bound",
    "bilinear_tree",
    "enumerate_value",
    "export_level_stats",
    "export_trajectory",
]


@dataclass
class ControlGrid:
    """Sorted distinct control points discretizing a box ``[lo, hi]``."""

    values: np.ndarray
    box: tuple | None = None

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if np.any(np.diff(self.values) <= 0):
            raise ValueError("control values must be strictly increasing")
        if self.box is not None:
            lo, hi = self.box
            if self.values.min() < lo or self.values.max() > hi:
                raise ValueError("control values fall outside the stated box")

    @classmethod
    def from_box(cls, lo, hi, count):
        """Uniform discretization with ``count`` points including extremes."""
        if count < 2:
            raise ValueError("need at least two control points")
        return cls(np.linspace(lo, hi, count), box=(lo, hi))

    def refined(self):
        """Halve the step: ``M -> 2M - 1`` points, keeping existing ones."""
        if self.box is None:
            raise ValueError("refinement requires a control box")
        return ControlGrid.from_box(self.box[0], self.box[1], 2 * len(self) - 1)

    def extremes(self):
        return ControlGrid(np.array([self.values[0], self.values[-1]]), box=self.box)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, j):
        return float(self.values[j])


# ------------------------------------------------------------ pruning rules


@dataclass
class GeometricPruning:
    """Merge a new node into the first retained node within ``eps``."""

    eps: float
    cell_hash: str | bool = "auto"

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


@dataclass
class MonotoneControls:
    """Admit only nondecreasing control sequences along every path."""


@dataclass
class StatisticalConstraint:
    """Discard nodes outside per-level boxes from time level ``n_start`` on."""

    boxes: list
    n_start: int = 3

    def admits(self, level, state):
        if level < self.n_start or level >= len(self.boxes):
            return True
        box = self.boxes[level]
        if box is None:
            return True
        lo, hi = box
        return bool(np.all(state >= lo - 1e-12) and np.all(state <= hi + 1e-12))


class _MergeFinder:
    # Finds the lowest-index retained node within eps of a query point.
    # An optional cell hash on the three leading coordinates prefilters
    # candidates; per-coordinate distance <= eps guarantees the superset.

    def __init__(self, eps, use_hash):
        self.eps = float(eps)
        self.use_hash = bool(use_hash) and self.eps > 0
        self.points = []
        self.cells = {}

    def _cell(self, v):
        return tuple(np.floor(v[:3] / self.eps).astype(np.int64))

    def query(self, v):
        if not self.points:
            return None
        if not self.use_hash:
            for idx, p in enumerate(self.points):
                if np.linalg.norm(p - v) <= self.eps:
                    return idx
            return None
        base = self._cell(v)
        best = None
        for off in np.ndindex(*(3,) * len(base)):
            key = tuple(b + o - 1 for b, o in zip(base, off))
            for idx in self.cells.get(key, ()):
                if best is not None and idx >= best:
                    continue
                if np.linalg.norm(self.points[idx] - v) <= self.eps:
                    best = idx
        return best

    def add(self, v):
        idx = len(self.points)
        self.points.append(v)
        if self.use_hash:
            self.cells.setdefault(self._cell(v), []).append(idx)
        return idx


# ------------------------------------------------------------ tree storage


@dataclass
class TreeLevel:
    """One time level: states plus parent/control/value bookkeeping."""

    states: list | None
    parent: np.ndarray
    control: np.ndarray
    node_cost: np.ndarray
    child_index: np.ndarray | None = None
    values: np.ndarray | None = None
    argmin: np.ndarray | None = None
    raw_count: int = 0
    merged_count: int = 0
    discarded_count: int = 0

    def __len__(self):
        return len(self.parent)


@dataclass
class Tree:
    """Leveled node store over the full horizon."""

    levels: list
    controls: ControlGrid
    dt: float
    t0: float = 0.0
    peak_storage: int = 0
    pruning: object | None = None

    @property
    def n_steps(self):
        return len(self.levels) - 1

    def n_nodes(self):
        return sum(len(lvl) for lvl in self.levels)

    def level_sizes(self):
        return [len(lvl) for lvl in self.levels]

    def time(self, n):
        return self.t0 + n * self.dt

    @property
    def value(self):
        """Value at the root after :func:`backward_values`."""
        if self.levels[0].values is None:
            raise RuntimeError("run backward_values first")
        return float(self.levels[0].values[0])


def build_tree(x0, step, controls, n_steps, dt, *, t0=0.0, pruning=None,
               state_cost=None, on_node=None, encode=None, decode=None,
               size=None, node_cap=None, keep="all"):
    """Expand the tree of controlled trajectories level by level.

    Parameters
    ----------
    x0 : ndarray
        Root state.
    step : callable
        Discrete dynamics ``step(state, control_value, time) -> state``.
    controls : ControlGrid or array
        Discrete control set.
    pruning : optional
        :class:`GeometricPruning`, :class:`MonotoneControls`,
        :class:`StatisticalConstraint` or ``None``.
    state_cost : callable, optional
        Scalar cached per node (the state part of a control-separable
        running cost); defaults to 0.
    on_node : callable, optional
        ``on_node(level, time, state)`` invoked for every retained node,
        the root included, in deterministic construction order.
    encode, decode, size : callables, optional
        Node storage codec (e.g. rank-capped Tucker compression) and a
        per-node float counter feeding the storage accounting.
    node_cap : int, optional
        Abort with :class:`~hjbtree.errors.CapExceeded` when the retained
        node count would pass the cap.
    keep : str
        ``"all"`` keeps every level's states; ``"last"`` drops a level's
        states once its children are complete (values and costs remain).

    Steps returning NaN are excluded with a counted diagnostic instead of
    poisoning the tree.
    """
    if not isinstance(controls, ControlGrid):
        controls = ControlGrid(np.asarray(controls, dtype=float))
    if keep not in ("all", "last"):
        raise ValueError("keep must be 'all' or 'last'")
    encode = encode or (lambda s: s)
    decode = decode or (lambda s: s)
    size = size or (lambda s: int(np.size(s)))
    state_cost = state_cost or (lambda s: 0.0)
    M = len(controls)

    x0 = np.asarray(x0, dtype=float)
    root = TreeLevel(
        states=[encode(x0)],
        parent=np.array([-1]),
        control=np.array([-1]),
        node_cost=np.array([float(state_cost(x0))]),
        raw_count=1,
    )
    if on_node is not None:
        on_node(0, t0, x0)
    levels = [root]
    total_nodes = 1
    live = size(root.states[0])
    peak = live

    geometric = pruning if isinstance(pruning, GeometricPruning) else None
    monotone = isinstance(pruning, MonotoneControls)
    constraint = pruning if isinstance(pruning, StatisticalConstraint) else None

    for n in range(n_steps):
        lvl = levels[n]
        t = t0 + n * dt
        K = len(lvl)
        child_index = np.full((K, M), -1, dtype=np.int64)
        states, parents, ctrls, costs = [], [], [], []
        merged = discarded = raw = 0
        finder = None
        if geometric is not None:
            use_hash = geometric.cell_hash
            if use_hash == "auto":
                use_hash = K * M > 512
            finder = _MergeFinder(geometric.eps, use_hash)
        level_bytes = 0
        for i in range(K):
            parent_state = decode(lvl.states[i])
            j_start = max(int(lvl.control[i]), 0) if monotone else 0
            for j in range(j_start, M):
                child = step(parent_state, controls[j], t)
                raw += 1
                child = np.asarray(child, dtype=float)
                if np.isnan(child).any():
                    discarded += 1
                    continue
                if constraint is not None and not constraint.admits(n + 1, child):
                    discarded += 1
                    continue
                if finder is not None:
                    hit = finder.query(child.ravel())
                    if hit is not None:
                        child_index[i, j] = hit
                        merged += 1
                        continue
                idx = len(states)
                if node_cap is not None and total_nodes + 1 > node_cap:
                    raise CapExceeded(
                        f"node cap {node_cap} exceeded while expanding level {n + 1}"
                    )
                if finder is not None:
                    finder.add(child.ravel())
                if on_node is not None:
                    on_node(n + 1, t + dt, child)
                encoded = encode(child)
                states.append(encoded)
                level_bytes += size(encoded)
                parents.append(i)
                ctrls.append(j)
                costs.append(float(state_cost(child)))
                child_index[i, j] = idx
                total_nodes += 1
        lvl.child_index = child_index
        levels.append(TreeLevel(
            states=states,
            parent=np.asarray(parents, dtype=np.int64),
            control=np.asarray(ctrls, dtype=np.int64),
            node_cost=np.asarray(costs, dtype=float),
            raw_count=raw,
            merged_count=merged,
            discarded_count=discarded,
        ))
        live += level_bytes
        peak = max(peak, live)
        if keep == "last" and n >= 1:
            # children complete: parent states can go (the root is kept so
            # trajectories can be re-simulated)
            live -= sum(size(s) for s in lvl.states)
            lvl.states = None
    return Tree(levels=levels, controls=controls, dt=float(dt), t0=float(t0),
                peak_storage=peak, pruning=pruning)


# ----------------------------------------------------------- value recursion


def backward_values(tree, running_cost, terminal_cost):
    """Backward comparison recursion over a built tree.

    ``running_cost(q, u, t)`` maps the cached per-node state cost ``q``
    (vectorized), a control value and the time to the running cost;
    ``terminal_cost(q)`` maps cached costs to the terminal cost.  Ties in
    the minimization resolve to the smallest control index.  Nodes left
    without children (e.g. by box constraints) carry value ``inf``.
    """
    leaves = tree.levels[-1]
    leaves.values = np.asarray(terminal_cost(leaves.node_cost), dtype=float)
    for n in range(tree.n_steps - 1, -1, -1):
        lvl = tree.levels[n]
        nxt = tree.levels[n + 1]
        K, M = lvl.child_index.shape
        cand = np.full((K, M), np.inf)
        t = tree.time(n)
        for j in range(M):
            idx = lvl.child_index[:, j]
            ok = idx >= 0
            if not ok.any():
                continue
            run = running_cost(lvl.node_cost[ok], tree.controls[j], t)
            cand[ok, j] = nxt.values[idx[ok]] + tree.dt * np.asarray(run, dtype=float)
        lvl.argmin = np.argmin(cand, axis=1)
        lvl.values = cand[np.arange(K), lvl.argmin]
    return tree


@dataclass
class Trajectory:
    """Optimal root-to-horizon path extracted from a valued tree."""

    times: np.ndarray
    control_indices: np.ndarray
    control_values: np.ndarray
    node_indices: np.ndarray
    states: list | None
    cost: float


def optimal_trajectory(tree, running_cost, terminal_cost, step=None, decode=None):
    """Follow the stored minimizing indices from the root.

    States are taken from the tree when levels kept them, otherwise
    re-simulated with ``step`` from the root.  The accumulated discrete
    cost of the path is returned and equals the root value.
    """
    if tree.levels[0].values is None:
        raise RuntimeError("run backward_values first")
    decode = decode or (lambda s: s)
    idx = 0
    node_indices = [0]
    controls_idx = []
    cost = 0.0
    for n in range(tree.n_steps):
        lvl = tree.levels[n]
        j = int(lvl.argmin[idx])
        nxt_idx = int(lvl.child_index[idx, j])
        if nxt_idx < 0:
            raise NumericalError("optimal path hits a pruned-away child")
        cost += tree.dt * float(
            np.asarray(running_cost(lvl.node_cost[idx], tree.controls[j], tree.time(n)))
        )
        controls_idx.append(j)
        node_indices.append(nxt_idx)
        idx = nxt_idx
    cost += float(np.asarray(terminal_cost(tree.levels[-1].node_cost[idx])))

    states = None
    if all(lvl.states is not None for lvl in tree.levels):
        states = [decode(tree.levels[n].states[i])
                  for n, i in enumerate(node_indices)]
    elif step is not None and tree.levels[0].states is not None:
        states = [decode(tree.levels[0].states[0])]
        for n, j in enumerate(controls_idx):
            states.append(step(states[-1], tree.controls[j], tree.time(n)))

    controls_idx = np.asarray(controls_idx, dtype=np.int64)
    return Trajectory(
        times=tree.t0 + tree.dt * np.arange(tree.n_steps + 1),
        control_indices=controls_idx,
        control_values=tree.controls.values[controls_idx],
        node_indices=np.asarray(node_indices, dtype=np.int64),
        states=states,
        cost=cost,
    )


# -------------------------------------------------------- statistical rule


def statistical_refine(tree, rho, n_start=3):
    """Per-level boxes around the lowest-value nodes of a valued tree.

    At every level ``n >= n_start`` the ``ceil(rho * K_n)`` nodes of
    lowest value, always augmented with the optimal-path node, define an
    elementwise min/max box.  Earlier levels stay unconstrained.
    """
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    if tree.levels[0].values is None:
        raise RuntimeError("run backward_values first")
    # optimal-path node index per level
    path = [0]
    for n in range(tree.n_steps):
        lvl = tree.levels[n]
        path.append(int(lvl.child_index[path[-1], int(lvl.argmin[path[-1]])]))
    boxes = []
    for n, lvl in enumerate(tree.levels):
        if n < n_start or lvl.states is None:
            boxes.append(None)
            continue
        K = len(lvl)
        keep = max(1, math.ceil(rho * K))
        order = np.argsort(lvl.values, kind="stable")[:keep]
        chosen = set(order.tolist())
        chosen.add(path[n])
        stack = np.stack([np.asarray(lvl.states[i], dtype=float)
                          for i in sorted(chosen)])
        boxes.append((stack.min(axis=0), stack.max(axis=0)))
    return boxes


def statistical_loop(x0, step, control_box, n_steps, dt, *, running_cost,
                     terminal_cost, state_cost, m0=2, rho=0.2, n_start=3,
                     tol=1e-4, k_max=6, t0=0.0, node_cap=None):
    """Iterative statistical pruning with control-set doubling.

    Builds a first tree with ``m0`` controls, then repeatedly refines the
    control grid (``M -> 2M - 1``), constrains the new tree to the boxes
    of the previous iteration's lowest-value nodes, and stops once the
    root value stalls within ``tol`` or ``k_max`` refinements ran.  The
    root-value history is nonincreasing by construction.

    Returns ``(tree, history, control_counts)``.
    """
    grid = ControlGrid.from_box(*control_box, m0)
    tree = build_tree(x0, step, grid, n_steps, dt, t0=t0,
                      state_cost=state_cost, node_cap=node_cap)
    backward_values(tree, running_cost, terminal_cost)
    history = [tree.value]
    counts = [len(grid)]
    res = np.inf
    k = 1
    while res > tol and k <= k_max:
        boxes = statistical_refine(tree, rho, n_start)
        grid = grid.refined()
        new_tree = build_tree(
            x0, step, grid, n_steps, dt, t0=t0, state_cost=state_cost,
            pruning=StatisticalConstraint(boxes, n_start), node_cap=node_cap,
        )
        backward_values(new_tree, running_cost, terminal_cost)
        res = abs(history[-1] - new_tree.value)
        tree = new_tree
        history.append(tree.value)
        counts.append(len(grid))
        k += 1
    return tree, history, counts


# --------------------------------------------------- structural cardinality


def monotone_cardinality(n_controls, n_steps):
    """Node count of the monotone-control tree: ``(M+N)! / (M! N!)``."""
    if n_controls < 1 or n_steps < 1:
        raise ValueError("need at least one control and one step")
    return math.comb(n_controls + n_steps, n_steps)


def sum_based_bound(n_controls, n_levels):
    """Cardinality bound for sum-based pruning over ``n_levels`` time levels.

    ``(M - 1) * l * (l - 1) / 2 + l + 1`` for ``l`` levels (the root
    included); tight up to one node for a uniformly discretized grid.
    """
    l = int(n_levels)
    return (n_controls - 1) * l * (l - 1) // 2 + l + 1


def bilinear_tree(solver, y0, controls, n_steps, dt, *, t0=0.0, state_cost=None,
                  on_node=None, materialize=True):
    """Exact sum-merged tree for bilinear dynamics ``dy/dt = Ly + u y``.

    Under the semi-implicit scheme every node is a scalar multiple of the
    control-free direction ``(I - dt L)^{-n} y0``, and nodes sharing the
    same multiset of applied controls coincide.  With a uniformly spaced
    control grid the level-``n`` nodes are indexed by the sum of applied
    control indices, so the level holds ``n (M - 1) + 1`` nodes and the
    whole tree grows quadratically; merged duplicates redirect to the
    first-encountered representative.  Only ``n_steps`` shifted solves
    are performed in total.

    ``on_node`` is invoked for every retained node like in
    :func:`build_tree`; with ``materialize=False`` node states are
    evaluated transiently (costs and hooks still see them) but not stored.
    """
    if not isinstance(controls, ControlGrid):
        controls = ControlGrid(np.asarray(controls, dtype=float))
    state_cost = state_cost or (lambda s: 0.0)
    M = len(controls)
    y0 = np.asarray(y0, dtype=float)

    root = TreeLevel(states=[y0], parent=np.array([-1]), control=np.array([-1]),
                     node_cost=np.array([float(state_cost(y0))]), raw_count=1)
    if on_node is not None:
        on_node(0, t0, y0)
    levels = [root]
    coefs = np.array([1.0])  # per-node scalar on the shared direction
    sums = np.array([0], dtype=np.int64)  # per-node sum of control indices
    direction = y0
    for n in range(n_steps):
        lvl = levels[n]
        direction = solver.solve(direction)
        K = len(lvl)
        child_index = np.full((K, M), -1, dtype=np.int64)
        sum_to_idx = {}
        new_coefs, new_sums, parents, ctrls = [], [], [], []
        for i in range(K):
            for j in range(M):
                s = int(sums[i]) + j
                if s in sum_to_idx:
                    child_index[i, j] = sum_to_idx[s]
                    continue
                idx = len(new_coefs)
                sum_to_idx[s] = idx
                child_index[i, j] = idx
                new_coefs.append(coefs[i] * (1.0 + dt * controls[j]))
                new_sums.append(s)
                parents.append(i)
                ctrls.append(j)
        lvl.child_index = child_index
        coefs = np.asarray(new_coefs)
        sums = np.asarray(new_sums, dtype=np.int64)
        costs = np.empty(len(coefs))
        states = [] if materialize else None
        for k, c in enumerate(coefs):
            node = c * direction
            costs[k] = float(state_cost(node))
            if on_node is not None:
                on_node(n + 1, t0 + (n + 1) * dt, node)
            if materialize:
                states.append(node)
        levels.append(TreeLevel(
            states=states,
            parent=np.asarray(parents, dtype=np.int64),
            control=np.asarray(ctrls, dtype=np.int64),
            node_cost=costs,
            raw_count=K * M,
            merged_count=K * M - len(states) if materialize else K * M - len(coefs),
        ))
    return Tree(levels=levels, controls=controls, dt=float(dt), t0=float(t0))


# ------------------------------------------------------------ brute force


def enumerate_value(x0, step, controls, n_steps, dt, *, running_cost,
                    terminal_cost, state_cost, t0=0.0, cap=10**4):
    """Exhaustive minimum over all control sequences (test oracle).

    Independent of the tree machinery: integrates every sequence of the
    ``M^n`` possibilities and accumulates the discrete cost directly.
    Refused above ``cap`` sequences.
    """
    if not isinstance(controls, ControlGrid):
        controls = ControlGrid(np.asarray(controls, dtype=float))
    M = len(controls)
    if M**n_steps > cap:
        raise CapExceeded(f"{M}**{n_steps} sequences exceed the oracle cap {cap}")
    best = (np.inf, None)
    for seq in np.ndindex(*(M,) * n_steps):
        y = np.asarray(x0, dtype=float)
        cost = 0.0
        for n, j in enumerate(seq):
            t = t0 + n * dt
            cost += dt * float(np.asarray(
                running_cost(state_cost(y), controls[j], t)))
            y = step(y, controls[j], t)
        cost += float(np.asarray(terminal_cost(state_cost(y))))
        if cost < best[0]:
            best = (cost, seq)
    return best


# ------------------------------------------------------------------ exports


def export_level_stats(tree, path):
    """CSV of per-level cardinalities and value ranges."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "raw_count", "merged", "discarded", "count",
                    "min_value", "max_value"])
        for n, lvl in enumerate(tree.levels):
            if lvl.values is not None and len(lvl):
                vmin, vmax = float(np.min(lvl.values)), float(np.max(lvl.values))
            else:
                vmin = vmax = float("nan")
            w.writerow([n, lvl.raw_count, lvl.merged_count, lvl.discarded_count,
                        len(lvl), repr(vmin), repr(vmax)])


def export_trajectory(traj, path, state_ref=None):
    """CSV of the optimal path: time, control, state snapshot reference."""
    refs = state_ref or ["" for _ in traj.times]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "control_index", "control_value", "state_ref"])
        for k, t in enumerate(traj.times):
            if k < len(traj.control_indices):
                ci = int(traj.control_indices[k])
                cv = repr(float(traj.control_values[k]))
            else:
                ci, cv = -1, ""
            w.writerow([repr(float(t)), ci, cv, refs[k]])

import csv

import numpy as np
import pytest

from hjbtree.dynamics import ShiftedSolver, fd_operators
from hjbtree.errors import CapExceeded
from hjbtree.tree import (
    ControlGrid,
    GeometricPruning,
    MonotoneControls,
    backward_values,
    bilinear_tree,
    build_tree,
    enumerate_value,
    export_level_stats,
    export_trajectory,
    monotone_cardinality,
    optimal_trajectory,
    statistical_loop,
    statistical_refine,
    sum_based_bound,
)

RNG = np.random.default_rng(7)


def sq_cost(s):
    s = np.asarray(s, dtype=float)
    return float(np.sum(s * s))


def running(q, u, t):
    return q + 0.1 * u**2


def terminal(q):
    return q


# ----------------------------------------------------------- control grids


def test_control_grid_refinement_schedule():
    grid = ControlGrid.from_box(-2.0, 0.0, 2)
    counts = [len(grid)]
    for _ in range(5):
        grid = grid.refined()
        counts.append(len(grid))
    assert counts == [2, 3, 5, 9, 17, 33]
    # refinement keeps previous points
    coarse = ControlGrid.from_box(-2.0, 0.0, 3)
    fine = coarse.refined()
    assert all(any(np.isclose(v, w) for w in fine.values) for v in coarse.values)


def test_control_grid_validation():
    with pytest.raises(ValueError):
        ControlGrid([0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        ControlGrid.from_box(0.0, 1.0, 1)
    assert list(ControlGrid.from_box(0, 1, 3).extremes().values) == [0.0, 1.0]


# ----------------------------------------------------------- tree building


def linear_step(x, u, t):
    return x + 0.1 * (0.5 * x + u)


def test_unpruned_binary_tree_counts():
    tree = build_tree(np.ones(2), linear_step, [0.0, 1.0], 10, 0.1,
                      state_cost=sq_cost)
    assert tree.n_nodes() == 2047
    assert tree.level_sizes() == [2**k for k in range(11)]


def test_three_controls_two_steps_count():
    tree = build_tree(np.ones(1), linear_step, [-1.0, 0.0, 1.0], 2, 0.1)
    assert tree.n_nodes() == 13  # 1 + 3 + 9


def test_frozen_dynamics_collapse_under_geometric_pruning():
    tree = build_tree(np.ones(3), lambda x, u, t: x, [0.0, 1.0], 5, 0.1,
                      pruning=GeometricPruning(eps=1e-8))
    assert tree.level_sizes() == [1] * 6
    assert tree.levels[1].merged_count == 1


def test_geometric_eps_zero_keeps_distinct_nodes():
    tree = build_tree(np.ones(1), linear_step, [0.0, 1.0], 4, 0.1,
                      pruning=GeometricPruning(eps=0.0))
    assert tree.n_nodes() == 2**5 - 1


def test_geometric_huge_eps_single_survivor():
    tree = build_tree(np.ones(1), linear_step, [0.0, 1.0], 4, 0.1,
                      pruning=GeometricPruning(eps=1e9))
    assert tree.level_sizes() == [1] * 5


def test_cell_hash_matches_bruteforce_scan():
    def wander(x, u, t):
        return x + np.array([u, 1.0 - u]) * 0.05

    a = build_tree(np.zeros(2), wander, np.linspace(0, 1, 4), 6, 0.1,
                   pruning=GeometricPruning(eps=0.03, cell_hash=False))
    b = build_tree(np.zeros(2), wander, np.linspace(0, 1, 4), 6, 0.1,
                   pruning=GeometricPruning(eps=0.03, cell_hash=True))
    assert a.level_sizes() == b.level_sizes()
    for la, lb in zip(a.levels, b.levels):
        assert np.array_equal(la.parent, lb.parent)
        assert np.array_equal(la.control, lb.control)


def test_nan_steps_are_excluded():
    def bad(x, u, t):
        return x * np.nan if u > 0.5 else x + 0.1

    tree = build_tree(np.zeros(1), bad, [0.0, 1.0], 3, 0.1)
    assert tree.level_sizes() == [1, 1, 1, 1]
    assert tree.levels[1].discarded_count == 1


def test_node_cap_enforced():
    with pytest.raises(CapExceeded):
        build_tree(np.ones(1), linear_step, [0.0, 1.0], 10, 0.1, node_cap=100)


def test_keep_last_drops_states_but_not_root():
    tree = build_tree(np.ones(2), linear_step, [0.0, 1.0], 5, 0.1,
                      state_cost=sq_cost, keep="last")
    assert tree.levels[0].states is not None
    assert all(tree.levels[n].states is None for n in range(1, 5))
    assert tree.levels[5].states is not None
    # values still computable from cached costs
    backward_values(tree, running, terminal)
    traj = optimal_trajectory(tree, running, terminal, step=linear_step)
    assert traj.states is not None
    assert np.isclose(traj.cost, tree.value, atol=1e-12)


def test_peak_storage_accounting_last_vs_all():
    t_all = build_tree(np.ones(4), linear_step, [0.0, 1.0], 8, 0.1)
    t_last = build_tree(np.ones(4), linear_step, [0.0, 1.0], 8, 0.1, keep="last")
    assert t_last.peak_storage < t_all.peak_storage
    # at most two adjacent levels (plus the retained root) are live
    assert t_last.peak_storage <= 4 * (2**8 + 2**7 + 1)


# ---------------------------------------------------------- value recursion


def test_backward_all_zero_costs():
    tree = build_tree(np.ones(1), linear_step, [0.0, 1.0], 3, 0.1)
    backward_values(tree, lambda q, u, t: 0.0 * q, lambda q: 0.0 * q)
    for lvl in tree.levels:
        assert np.allclose(lvl.values, 0.0)


def test_backward_single_step_formula():
    dt = 0.25
    x0 = np.array([2.0])
    tree = build_tree(x0, lambda x, u, t: x, [-1.0, 0.5], 1, dt,
                      state_cost=sq_cost)
    backward_values(tree, running, terminal)
    q = sq_cost(x0)
    expected = min(dt * (q + 0.1 * u**2) + q for u in (-1.0, 0.5))
    assert np.isclose(tree.value, expected, atol=1e-14)


def test_backward_matches_enumeration_scalar():
    dt, n = 0.2, 4
    controls = [-1.0, 0.0, 1.0]

    def step(x, u, t):
        return x + dt * (-(x**3) + u + 0.3 * np.sin(t))

    x0 = np.array([0.7])
    tree = build_tree(x0, step, controls, n, dt, state_cost=sq_cost)
    backward_values(tree, running, terminal)
    best, seq = enumerate_value(x0, step, controls, n, dt, running_cost=running,
                                terminal_cost=terminal, state_cost=sq_cost)
    assert np.isclose(tree.value, best, atol=1e-12)
    traj = optimal_trajectory(tree, running, terminal)
    assert np.isclose(traj.cost, best, atol=1e-12)
    assert tuple(traj.control_indices) == seq


def test_backward_matches_enumeration_2d():
    dt, n = 0.2, 5
    controls = [0.0, 0.5, 1.0]

    def step(x, u, t):
        return x + dt * np.array([x[1], -x[0] + u])

    x0 = np.array([0.4, -0.3])
    tree = build_tree(x0, step, controls, n, dt, state_cost=sq_cost)
    backward_values(tree, running, terminal)
    best, _ = enumerate_value(x0, step, controls, n, dt, running_cost=running,
                              terminal_cost=terminal, state_cost=sq_cost)
    assert np.isclose(tree.value, best, atol=1e-12)


def test_tie_break_smallest_control_index():
    # symmetric controls with |u| identical costs: index 0 must win
    tree = build_tree(np.array([0.0]), lambda x, u, t: x + u * 0.0, [-1.0, 1.0],
                      2, 0.1, state_cost=sq_cost)
    backward_values(tree, running, terminal)
    assert all(int(j) == 0 for lvl in tree.levels[:-1] for j in lvl.argmin)


def test_single_control_tree_unique_path():
    tree = build_tree(np.array([1.0, 2.0]), linear_step, [0.5, 0.7], 6, 0.1,
                      state_cost=sq_cost, pruning=MonotoneControls())
    backward_values(tree, running, terminal)
    traj = optimal_trajectory(tree, running, terminal)
    assert len(traj.control_indices) == 6
    assert np.isclose(traj.cost, tree.value, atol=1e-12)


def test_geometric_pruning_soundness_eps_zero():
    a = build_tree(np.ones(1), linear_step, [0.0, 1.0], 6, 0.1, state_cost=sq_cost)
    b = build_tree(np.ones(1), linear_step, [0.0, 1.0], 6, 0.1, state_cost=sq_cost,
                   pruning=GeometricPruning(eps=0.0))
    backward_values(a, running, terminal)
    backward_values(b, running, terminal)
    assert np.isclose(a.value, b.value, atol=1e-14)


# ----------------------------------------------------------- monotone rule


@pytest.mark.parametrize("m", range(1, 7))
@pytest.mark.parametrize("n", range(1, 7))
def test_monotone_cardinality_by_construction(m, n):
    if m == 1:
        controls = [0.3]
    else:
        controls = np.linspace(-1, 1, m)
    tree = build_tree(np.ones(1), linear_step, np.atleast_1d(controls), n, 0.1,
                      pruning=MonotoneControls())
    assert tree.n_nodes() == monotone_cardinality(m, n)


def test_monotone_cardinality_closed_forms():
    assert monotone_cardinality(1, 5) == 6
    assert monotone_cardinality(5, 1) == 6
    assert monotone_cardinality(2, 3) == 10


def test_monotone_value_dominates_unconstrained():
    dt, n = 0.2, 5
    controls = [-1.0, 0.0, 1.0]

    def step(x, u, t):
        return x + dt * (-x + u)

    x0 = np.array([1.5])
    free = build_tree(x0, step, controls, n, dt, state_cost=sq_cost)
    mono = build_tree(x0, step, controls, n, dt, state_cost=sq_cost,
                      pruning=MonotoneControls())
    backward_values(free, running, terminal)
    backward_values(mono, running, terminal)
    assert mono.value >= free.value - 1e-14


# ----------------------------------------------------------- bilinear rule


def make_bilinear_solver(n=6, dt=0.05):
    A, _, _ = fd_operators(n, bounds=(-5, 5), bc="dirichlet",
                           advection=0.5, scheme="upwind")
    mats = [A, np.zeros((n, n))]
    return ShiftedSolver(mats, dt), mats


def test_bilinear_tree_single_step():
    solver, _ = make_bilinear_solver()
    y0 = RNG.standard_normal((6, 6))
    tree = bilinear_tree(solver, y0, [-3.0, -1.0], 1, 0.05, state_cost=sq_cost)
    assert tree.n_nodes() == 3


def test_bilinear_tree_quadratic_growth_and_bound():
    solver, _ = make_bilinear_solver()
    y0 = RNG.standard_normal((6, 6))
    for n_steps in (5, 12):
        tree = bilinear_tree(solver, y0, [-3.0, -1.0], n_steps, 0.05,
                             state_cost=sq_cost)
        assert tree.level_sizes() == [k + 1 for k in range(n_steps + 1)]
        assert tree.n_nodes() <= sum_based_bound(2, n_steps + 1)


def test_bilinear_general_m_counts():
    solver, _ = make_bilinear_solver()
    y0 = RNG.standard_normal((6, 6))
    tree = bilinear_tree(solver, y0, [-3.0, -2.0, -1.0], 6, 0.05)
    assert tree.level_sizes() == [2 * k + 1 for k in range(7)]
    assert tree.n_nodes() <= sum_based_bound(3, 7)


def test_bilinear_nodes_coincide_with_generic_tree():
    # the merged tree carries the same value function as the unpruned one
    solver, mats = make_bilinear_solver()
    y0 = RNG.standard_normal((6, 6))
    dt, n_steps = 0.05, 6

    def step(x, u, t):
        return solver.solve(x) * (1.0 + dt * u)

    merged = bilinear_tree(solver, y0, [-3.0, -1.0], n_steps, dt,
                           state_cost=sq_cost)
    full = build_tree(y0, step, [-3.0, -1.0], n_steps, dt, state_cost=sq_cost)
    backward_values(merged, running, terminal)
    backward_values(full, running, terminal)
    assert np.isclose(merged.value, full.value, rtol=1e-12)


def test_bilinear_permuted_sequences_coincide():
    solver, _ = make_bilinear_solver()
    y0 = RNG.standard_normal((6, 6))
    dt = 0.05

    def run(seq):
        y = y0
        for u in seq:
            y = solver.solve(y) * (1.0 + dt * u)
        return y

    seq = [-3.0, -1.0, -1.0, -3.0, -3.0, -1.0]
    a, b = run(seq), run(seq[::-1])
    assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(a)


# -------------------------------------------------------- statistical rule


def vdp_step(x, u, t, dt=0.2, omega=0.15):
    return x + dt * np.array([x[1], omega * (1 - x[0] ** 2) * x[1] - x[0] + u])


def test_statistical_refine_rho_one_is_hull():
    tree = build_tree(np.array([0.4, -0.3]), vdp_step, [0.0, 1.0], 5, 0.2,
                      state_cost=sq_cost)
    backward_values(tree, running, terminal)
    boxes = statistical_refine(tree, rho=1.0, n_start=2)
    for n, box in enumerate(boxes):
        if box is None:
            continue
        stack = np.stack(tree.levels[n].states)
        assert np.allclose(box[0], stack.min(axis=0))
        assert np.allclose(box[1], stack.max(axis=0))


def test_statistical_boxes_contain_next_iteration_nodes():
    x0 = np.array([0.4, -0.3])
    t1 = build_tree(x0, vdp_step, ControlGrid.from_box(0, 1, 2), 7, 0.2,
                    state_cost=sq_cost)
    backward_values(t1, running, terminal)
    boxes = statistical_refine(t1, rho=0.3, n_start=3)
    from hjbtree.tree import StatisticalConstraint

    t2 = build_tree(x0, vdp_step, ControlGrid.from_box(0, 1, 3), 7, 0.2,
                    state_cost=sq_cost,
                    pruning=StatisticalConstraint(boxes, n_start=3))
    for n in range(3, 8):
        lo, hi = boxes[n]
        for s in t2.levels[n].states:
            assert np.all(s >= lo - 1e-9) and np.all(s <= hi + 1e-9)


def test_statistical_loop_monotone_history_and_schedule():
    tree, history, counts = statistical_loop(
        np.array([0.4, -0.3]), vdp_step, (0.0, 1.0), 7, 0.2,
        running_cost=running, terminal_cost=terminal, state_cost=sq_cost,
        rho=0.3, n_start=3, tol=1e-10, k_max=4,
    )
    assert counts == [2, 3, 5, 9, 17][: len(counts)]
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_statistical_loop_infinite_tol_single_iteration():
    tree, history, counts = statistical_loop(
        np.array([0.4, -0.3]), vdp_step, (0.0, 1.0), 4, 0.2,
        running_cost=running, terminal_cost=terminal, state_cost=sq_cost,
        tol=np.inf,
    )
    assert len(history) == 1 and counts == [2]


# ----------------------------------------------------------------- exports


def test_csv_exports(tmp_path):
    tree = build_tree(np.ones(2), linear_step, [0.0, 1.0], 4, 0.1,
                      state_cost=sq_cost)
    backward_values(tree, running, terminal)
    stats = tmp_path / "levels.csv"
    export_level_stats(tree, stats)
    rows = list(csv.reader(stats.open()))
    assert rows[0][0] == "level" and len(rows) == 6
    assert int(rows[1][4]) == 1

    traj = optimal_trajectory(tree, running, terminal)
    out = tmp_path / "traj.csv"
    export_trajectory(traj, out)
    rows = list(csv.reader(out.open()))
    assert len(rows) == 6
    assert float(rows[1][0]) == 0.0

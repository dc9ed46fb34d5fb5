import numpy as np
import pytest

from hjbtree.dynamics import SemiImplicitStepper, SemilinearModel, fd_operators
from hjbtree.errors import NumericalError
from hjbtree.reduction import (
    HoDeim,
    HoPod,
    ReducedModel,
    load_reduction,
    node_codec,
    qdeim,
    reduce_model,
    save_reduction,
)
from hjbtree.tensors import kron_apply, multi_mode_product, sthosvd, vec

RNG = np.random.default_rng(42)


def low_rank_tensor(dims, rank, rng):
    t = np.zeros(dims)
    for _ in range(rank):
        fac = [rng.standard_normal(n) for n in dims]
        t += np.einsum("i,j->ij", *fac) if len(dims) == 2 else np.einsum("i,j,k->ijk", *fac)
    return t


# ------------------------------------------------------------------ HoPod


def test_projection_error_in_span_and_orthogonal():
    pod = HoPod(max_rank=4, trunc_tol=1e-10)
    A = low_rank_tensor((6, 6), 2, RNG)
    pod.partial_fit(A)
    assert pod.projection_error(A) < 1e-12
    # tensor orthogonal to the basis in every mode
    V0 = pod._work[0]
    v = RNG.standard_normal(6)
    v -= V0 @ (V0.T @ v)
    w = RNG.standard_normal(6)
    W0 = pod._work[1]
    w -= W0 @ (W0.T @ w)
    assert np.isclose(pod.projection_error(np.outer(v, w)), 1.0, atol=1e-10)


def test_projection_error_matches_dense_projector():
    pod = HoPod(max_rank=3, trunc_tol=1e-8)
    for _ in range(2):
        pod.partial_fit(RNG.standard_normal((4, 5)))
    pod.finalize()
    Y = RNG.standard_normal((4, 5))
    V = pod.factors_
    P = np.kron(V[1] @ V[1].T, V[0] @ V[0].T)
    dense = np.linalg.norm(vec(Y) - P @ vec(Y)) / np.linalg.norm(vec(Y))
    assert np.isclose(pod.projection_error(Y), dense, atol=1e-12)


def test_first_update_reproduces_sthosvd_factors():
    pod = HoPod(max_rank=3, trunc_tol=1e-8)
    Y = RNG.standard_normal((5, 6, 4))
    pod.partial_fit(Y)
    t = sthosvd(Y, 3)
    for m in range(3):
        assert np.allclose(pod._acc_v[m], t.factors[m])
        assert np.allclose(pod._acc_s[m], t.sigmas[m])


def test_repeated_snapshot_leaves_span_unchanged():
    pod = HoPod(max_rank=4, trunc_tol=1e-10)
    Y = low_rank_tensor((7, 7), 2, RNG)
    pod.partial_fit(Y)
    before = [W.copy() for W in pod._work]
    pod.partial_fit(Y)
    for W0, W1 in zip(before, pod._work):
        # principal angles between the two spans are all zero
        s = np.linalg.svd(W0.T @ W1, compute_uv=False)
        assert np.allclose(s, 1.0, atol=1e-10)


def test_zero_snapshot_is_noop():
    pod = HoPod(max_rank=3)
    pod.partial_fit(np.zeros((4, 4)))
    assert pod.n_snapshots_in_ == 0
    assert pod._acc_v[0] is None
    assert pod.projection_error(np.zeros((4, 4))) == 0.0


def test_finalize_rank_selection():
    # tau -> 0 with exact-rank accumulators retains exactly that rank
    pod = HoPod(max_rank=6, trunc_tol=1e-12)
    Y = low_rank_tensor((8, 8), 2, RNG)
    pod.partial_fit(Y)
    pod.finalize()
    assert pod.ranks_ == (2, 2)
    # tau = 1 keeps a single vector per mode
    pod1 = HoPod(max_rank=6, trunc_tol=1.0)
    pod1.partial_fit(low_rank_tensor((8, 8), 3, RNG))
    pod1.finalize()
    assert pod1.ranks_ == (1, 1)


def test_rank_cap_and_update_after_finalize():
    pod = HoPod(max_rank=2, trunc_tol=1e-14)
    for _ in range(4):
        pod.partial_fit(RNG.standard_normal((5, 5)))
    assert all(V.shape[1] <= 2 for V in pod._acc_v)
    pod.finalize()
    assert max(pod.ranks_) <= 2
    with pytest.raises(RuntimeError):
        pod.partial_fit(np.zeros((5, 5)) + 1.0)


def test_transform_lift_roundtrip_and_isometry():
    pod = HoPod(max_rank=3, trunc_tol=1e-8).fit(
        [RNG.standard_normal((6, 7)) for _ in range(3)]
    )
    Yh = RNG.standard_normal(pod.ranks_)
    assert np.allclose(pod.transform(pod.inverse_transform(Yh)), Yh, atol=1e-12)
    assert np.isclose(np.linalg.norm(pod.inverse_transform(Yh)),
                      np.linalg.norm(Yh), atol=1e-12)
    # lift o project is an orthogonal projector (idempotent)
    Y = RNG.standard_normal((6, 7))
    P1 = pod.inverse_transform(pod.transform(Y))
    P2 = pod.inverse_transform(pod.transform(P1))
    assert np.allclose(P1, P2, atol=1e-12)


def test_orthonormality_after_finalize():
    pod = HoPod(max_rank=5, trunc_tol=1e-6).fit(
        [RNG.standard_normal((6, 6, 6)) for _ in range(4)]
    )
    for V in pod.factors_:
        assert np.allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-12)


def test_vector_mode_basis():
    # order-1 snapshots give the classical snapshot-POD path
    pod = HoPod(max_rank=4, trunc_tol=1e-10)
    vs = [RNG.standard_normal(9) for _ in range(3)]
    pod.fit(vs)
    assert pod.factors_[0].shape[0] == 9
    for v in vs:
        assert pod.projection_error(v) < 1e-10


def test_snapshot_gate_uses_snapshot_tol():
    pod = HoPod(max_rank=5, trunc_tol=1e-12, snapshot_tol=0.5)
    A = low_rank_tensor((6, 6), 1, RNG)
    assert pod.consider(A)
    assert not pod.consider(A + 1e-3 * low_rank_tensor((6, 6), 1, RNG))
    assert pod.n_snapshots_in_ == 1


# ------------------------------------------------------------------ qdeim


def test_qdeim_identity_columns():
    Phi = np.eye(6)[:, [2, 5]]
    assert set(qdeim(Phi)) == {2, 5}


def test_qdeim_growth_bound_and_exactness():
    rng = np.random.default_rng(3)
    Phi, _, _ = np.linalg.svd(rng.standard_normal((12, 4)), full_matrices=False)
    rows = qdeim(Phi)
    block = Phi[rows, :]
    n, p = Phi.shape
    assert np.linalg.norm(np.linalg.inv(block), 2) <= np.sqrt(n - p + 1) * 2.0**p
    # interpolation reproduces anything in the span exactly
    x = Phi @ rng.standard_normal(p)
    coef = np.linalg.solve(block, x[rows])
    assert np.allclose(Phi @ coef, x, atol=1e-12)


def test_qdeim_rejects_rank_deficient():
    Phi = np.zeros((5, 2))
    Phi[:, 0] = 1.0
    Phi[:, 1] = 1.0
    with pytest.raises(NumericalError):
        qdeim(Phi / np.sqrt(5))


# ------------------------------------------------------------------ HoDeim


def test_hodeim_exact_on_tensor_span():
    rng = np.random.default_rng(11)
    A1 = low_rank_tensor((7, 7), 1, rng)
    A2 = low_rank_tensor((7, 7), 1, rng)
    deim = HoDeim(max_rank=4, trunc_tol=1e-12).fit([A1, A2])
    X = 0.3 * A1 - 1.7 * A2
    assert np.allclose(deim.interpolate(deim.sample(X)), X, atol=1e-10)


def test_hodeim_growth_constant_independent_recomputation():
    rng = np.random.default_rng(12)
    deim = HoDeim(max_rank=3, trunc_tol=1e-10).fit(
        [rng.standard_normal((8, 9)) for _ in range(3)]
    )
    expected = 1.0
    for Phi, idx in zip(deim.interp_factors_, deim.sample_indices_):
        P = np.eye(Phi.shape[0])[:, idx]
        expected *= np.linalg.norm(np.linalg.inv(P.T @ Phi), 2)
    assert np.isclose(deim.growth_const_, expected, rtol=1e-12)


def test_hodeim_zero_nonlinearity():
    deim = HoDeim(max_rank=2, trunc_tol=1e-8).fit([np.ones((5, 5))])
    assert np.allclose(deim.interpolate(deim.sample(np.zeros((5, 5)))), 0.0)


# ----------------------------------------------------------- ReducedModel


def test_reduce_operators_identity_basis():
    n = 5
    A = RNG.standard_normal((n, n))
    model = SemilinearModel([A, A.T.copy()])
    pod = HoPod(max_rank=n, trunc_tol=1e-14)
    pod.factors_ = [np.eye(n), np.eye(n)]
    pod.ranks_ = (n, n)
    pod.singular_values_ = [np.ones(n), np.ones(n)]
    pod._reset(2)
    pod.finalized_ = True
    rm = reduce_model(model, pod)
    assert np.allclose(rm.lin_mats[0], A)
    assert np.allclose(rm.lin_mats[1], A.T)


def test_reduce_operators_rank_one_hand_value():
    # V = ones/sqrt(3), A = tridiag(1,-2,1): V^T A V = -2/3
    A = np.array([[-2.0, 1, 0], [1, -2, 1], [0, 1, -2]])
    model = SemilinearModel([A, A])
    pod = HoPod(max_rank=1)
    pod.factors_ = [np.full((3, 1), 1 / np.sqrt(3))] * 2
    pod.ranks_ = (1, 1)
    pod.singular_values_ = [np.ones(1)] * 2
    pod._reset(2)
    pod.finalized_ = True
    rm = reduce_model(model, pod)
    assert np.isclose(rm.lin_mats[0][0, 0], -2.0 / 3.0)


def test_reduced_linear_action_matches_kron_oracle():
    n = 4
    mats = [RNG.standard_normal((n, n)) for _ in range(2)]
    model = SemilinearModel(mats)
    pod = HoPod(max_rank=2, trunc_tol=1e-12).fit(
        [RNG.standard_normal((n, n)) for _ in range(3)]
    )
    rm = reduce_model(model, pod)
    Yh = RNG.standard_normal(pod.ranks_)
    got = sum(
        np.moveaxis(np.tensordot(Ah, Yh, axes=(1, m)), 0, m)
        for m, Ah in enumerate(rm.lin_mats)
    )
    VY = [pod.factors_[0], pod.factors_[1]]
    L = model.dense_linear()
    Vk = np.kron(VY[1], VY[0])
    ref = Vk.T @ (L @ (Vk @ vec(Yh)))
    assert np.allclose(vec(got), ref, atol=1e-12)


def test_deim_route_matches_projected_route_with_complete_basis():
    # with a complete interpolation basis DEIM evaluation is exact
    n = 5
    A, B, _ = fd_operators(n, bc="dirichlet", diffusion=0.3)

    def f(ctx):
        return ctx.y * (1 - ctx.y**2) + 0.2 * ctx.dsum() + ctx.u * ctx.field("src")

    src = RNG.standard_normal((n, n))
    model = SemilinearModel([A, A], deriv_mats=[B, B], nonlinear=f,
                            fields={"src": src})
    pod = HoPod(max_rank=3, trunc_tol=1e-12).fit(
        [RNG.standard_normal((n, n)) for _ in range(4)]
    )
    deim = HoDeim(max_rank=n, trunc_tol=1e-14).fit(
        [RNG.standard_normal((n, n)) for _ in range(n)]
    )
    assert deim.ranks_ == (n, n)
    rm_exact = reduce_model(model, pod)
    rm_deim = reduce_model(model, pod, deim)
    Yh = RNG.standard_normal(pod.ranks_)
    a = rm_exact.nonlinear_value(Yh, -1.5, 0.0)
    b = rm_deim.nonlinear_value(Yh, -1.5, 0.0)
    assert np.allclose(a, b, atol=1e-10)


def test_deim_route_accuracy_on_cubic_trajectory():
    # Allen-Cahn-style cubic at desk scale: the sampled route tracks the
    # exact projected evaluation at the basis-tolerance error level
    n = 31
    A, _, _ = fd_operators(n, bounds=(-1, 1), bc="neumann", diffusion=0.1)

    def f(ctx):
        return ctx.y * (1 - ctx.y**2)

    model = SemilinearModel([A, A], nonlinear=f)
    x = np.linspace(-1, 1, n)
    Y = 2.0 + np.outer(np.cos(2 * np.pi * x), np.cos(2 * np.pi * x))
    stepper = SemiImplicitStepper(model, 0.05)
    pod = HoPod(max_rank=12, trunc_tol=1e-3)
    deim = HoDeim(max_rank=12, trunc_tol=1e-3)
    for _ in range(10):
        pod.consider(Y)
        deim.partial_fit(model.nonlinear_value(Y, 0.0, 0.0))
        Y = stepper(Y, 0.0, 0.0)
    pod.finalize()
    deim.finalize()
    rm_exact = reduce_model(model, pod)
    rm_deim = reduce_model(model, pod, deim)
    Yh = pod.transform(Y)
    a = rm_exact.nonlinear_value(Yh, 0.0, 0.0)
    b = rm_deim.nonlinear_value(Yh, 0.0, 0.0)
    assert np.linalg.norm(a - b) <= 5e-2 * np.linalg.norm(a)


def test_reduced_step_cost_independent_dimensions():
    deim = HoDeim(max_rank=3, trunc_tol=1e-10).fit(
        [RNG.standard_normal((9, 8)) for _ in range(3)]
    )
    assert all(len(idx) <= 3 for idx in deim.sample_indices_)


# ------------------------------------------------------------ node storage


def test_node_codec_roundtrip_and_sizes():
    n = 6
    model = SemilinearModel([np.zeros((n, n))] * 2)
    encode, decode, size = node_codec(model, max_rank=2)
    Y = low_rank_tensor((n, n), 2, RNG)
    node = encode(Y)
    assert np.allclose(decode(node), Y, atol=1e-12)
    assert size(node) == 2 * 2 + 2 * n * 2


def test_node_codec_memory_arithmetic():
    # order-3 example: 3*60*20 + 20^3 floats versus 60^3 dense
    t = sthosvd(RNG.standard_normal((60, 60, 60)), 20)
    assert t.storage_size() <= 3 * 60 * 20 + 20**3
    assert t.storage_size() < 60**3


def test_node_codec_tail_bound():
    Y = RNG.standard_normal((10, 10))
    # smooth field: damp high-frequency content
    U, s, Vt = np.linalg.svd(Y)
    s = s * np.exp(-np.arange(10))
    Y = (U * s) @ Vt
    model = SemilinearModel([np.zeros((10, 10))] * 2)
    encode, decode, _ = node_codec(model, max_rank=4)
    err = np.linalg.norm(decode(encode(Y)) - Y)
    assert err <= np.sqrt(np.sum(s[4:] ** 2)) + 1e-12


def test_node_codec_vector_passthrough():
    model = SemilinearModel([np.zeros((4, 4))])
    encode, decode, size = node_codec(model, max_rank=2)
    v = RNG.standard_normal(4)
    assert np.array_equal(decode(encode(v)), v)
    assert size(encode(v)) == 4


# ------------------------------------------------------------- persistence


def test_save_load_roundtrip(tmp_path):
    pod = HoPod(max_rank=4, trunc_tol=1e-6).fit(
        [RNG.standard_normal((6, 5)) for _ in range(3)]
    )
    deim = HoDeim(max_rank=3, trunc_tol=1e-6).fit(
        [RNG.standard_normal((6, 5)) for _ in range(3)]
    )
    path = tmp_path / "basis.npz"
    save_reduction(path, [pod], [deim], meta={"note": "roundtrip"})
    bases, deims, meta = load_reduction(path)
    assert meta == {"note": "roundtrip"}
    for V, W in zip(pod.factors_, bases[0].factors_):
        assert np.array_equal(V, W)
    for a, b in zip(deim.sample_indices_, deims[0].sample_indices_):
        assert np.array_equal(a, b)
    assert np.isclose(deims[0].growth_const_, deim.growth_const_, rtol=1e-14)
    Y = RNG.standard_normal((6, 5))
    assert np.allclose(pod.transform(Y), bases[0].transform(Y))

"""Dense tensor kernels: unfoldings, mode products, truncated SVD, STHOSVD.

Conventions
-----------
An order-``d`` tensor is a plain :class:`numpy.ndarray` with ``d`` axes
("modes", numbered ``0 .. d-1``).  ``vec`` ravels the first mode fastest
(Fortran order), i.e. it column-stacks the mode-0 unfolding.  The mode-``m``
unfolding is the ``n_m x prod(n_i, i != m)`` matrix whose columns enumerate
the remaining modes in increasing order, the first listed varying fastest.
With these two choices the identity

    vec(T x_0 M_0 x_1 M_1 ... x_{d-1} M_{d-1})
        = (M_{d-1} kron ... kron M_0) vec(T)

holds, and every Kronecker-based consistency test in this package relies
on it.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CapExceeded
from ._validation import check_mode

__all__ = [
    "vec",
    "unvec",
    "mode_unfold",
    "mode_refold",
    "mode_product",
    "multi_mode_product",
    "kron_apply",
    "truncated_svd",
    "tail_rank",
    "sthosvd",
    "Tucker",
]


def vec(T):
    """Vectorize a tensor with the first mode varying fastest."""
    return np.ravel(np.asarray(T), order="F")


def unvec(v, dims):
    """Inverse of :func:`vec` for the given mode sizes."""
    return np.reshape(np.asarray(v), tuple(dims), order="F")


def mode_unfold(T, mode):
    """Mode-``m`` unfolding, an ``n_m x prod(other dims)`` matrix.

    Columns enumerate the remaining modes in increasing order with the
    first listed varying fastest; :func:`mode_refold` inverts it exactly.
    """
    T = np.asarray(T)
    check_mode(mode, T.ndim)
    return np.reshape(np.moveaxis(T, mode, 0), (T.shape[mode], -1), order="F")


def mode_refold(M, mode, dims):
    """Refold a mode-``m`` unfolding back into a tensor of shape ``dims``."""
    dims = tuple(dims)
    check_mode(mode, len(dims))
    moved = (dims[mode],) + tuple(n for i, n in enumerate(dims) if i != mode)
    return np.moveaxis(np.reshape(np.asarray(M), moved, order="F"), 0, mode)


def mode_product(T, M, mode):
    """Mode-``m`` product ``T x_m M``, satisfying ``(T x_m M)_(m) = M T_(m)``."""
    T = np.asarray(T)
    M = np.asarray(M)
    check_mode(mode, T.ndim)
    if M.ndim != 2:
        raise ValueError("mode_product expects a matrix")
    if M.shape[1] != T.shape[mode]:
        raise ValueError(
            f"matrix has {M.shape[1]} columns but mode {mode} has size {T.shape[mode]}"
        )
    return np.moveaxis(np.tensordot(M, T, axes=(1, mode)), 0, mode)


def multi_mode_product(T, mats, transpose=False):
    """Apply one matrix per mode; ``None`` entries skip the mode.

    With ``transpose=True`` the transposed matrices are applied, which
    for orthonormal factors is the projection onto their column span.
    """
    Y = np.asarray(T)
    for m, M in enumerate(mats):
        if M is None:
            continue
        Y = mode_product(Y, M.T if transpose else M, m)
    return Y


def kron_apply(mats, x, max_entries=10**6):
    """Apply ``M_{d-1} kron ... kron M_0`` to a vector, formed explicitly.

    ``mats`` is listed mode-0 first, consistent with the vectorization
    convention of this module.  This is a brute-force reference used as a
    test oracle at small sizes only; the dense Kronecker matrix is refused
    above ``max_entries`` entries.
    """
    rows = int(np.prod([M.shape[0] for M in mats]))
    cols = int(np.prod([M.shape[1] for M in mats]))
    x = np.asarray(x)
    if cols != x.size:
        raise ValueError(f"operand length {x.size} does not match {cols} columns")
    if rows * cols > max_entries:
        raise CapExceeded(
            f"dense Kronecker product would hold {rows * cols} entries "
            f"(cap {max_entries})"
        )
    K = np.array([[1.0]])
    for M in reversed(list(mats)):
        K = np.kron(K, M)
    return K @ x


def _fix_signs(U, Vt=None):
    # Deterministic orientation: first entry of each left singular vector
    # that is meaningfully nonzero is made positive.
    for j in range(U.shape[1]):
        col = U[:, j]
        big = np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300)
        if not big.any():
            continue
        if col[np.argmax(big)] < 0:
            U[:, j] = -col
            if Vt is not None:
                Vt[j, :] = -Vt[j, :]
    return U, Vt


def tail_rank(s, tol):
    """Smallest retained rank whose discarded tail passes the relative test.

    ``k`` is minimal with ``sqrt(sum_{i>k} s_i^2) < tol * sqrt(sum s_i^2)``;
    an exactly zero tail always passes, so exact-rank inputs return their
    rank and an all-zero spectrum returns 0.
    """
    s = np.asarray(s, dtype=float)
    total = float(np.sqrt(np.sum(s**2)))
    if total == 0.0:
        return 0
    tails = np.sqrt(np.concatenate([np.cumsum(s[::-1] ** 2)[::-1], [0.0]]))
    for k in range(len(s) + 1):
        if tails[k] == 0.0 or tails[k] < tol * total:
            return k
    return len(s)


def truncated_svd(M, rank=None, tol=None):
    """Truncated SVD ``(U, s, Vt)`` with a deterministic sign convention.

    Truncation keeps ``min(rank, tail_rank(s, tol))`` triplets; with both
    arguments ``None`` the full thin factorization is returned.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        k = 0
        return M.reshape(M.shape[0], 0), np.zeros(0), np.zeros((0, M.shape[-1] if M.ndim == 2 else 0))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    k = len(s)
    if tol is not None:
        k = min(k, tail_rank(s, tol))
    if rank is not None:
        k = min(k, int(rank))
    U, s, Vt = U[:, :k].copy(), s[:k].copy(), Vt[:k, :].copy()
    _fix_signs(U, Vt)
    return U, s, Vt


@dataclass
class Tucker:
    """Tucker-format tensor: a core multiplied by one factor per mode."""

    core: np.ndarray
    factors: list
    sigmas: list = field(default_factory=list)

    @property
    def dims(self):
        return tuple(U.shape[0] for U in self.factors)

    @property
    def ranks(self):
        return tuple(U.shape[1] for U in self.factors)

    def to_dense(self):
        return multi_mode_product(self.core, self.factors)

    def storage_size(self):
        """Number of stored floats (core plus factors)."""
        return self.core.size + sum(U.size for U in self.factors)


def sthosvd(T, max_rank):
    """Sequentially truncated higher-order SVD at a per-mode rank cap.

    Modes are processed in increasing order, each factor taken from the
    SVD of the current partially projected unfolding.  For matrices a
    single standard SVD provides both factors at once.
    """
    T = np.asarray(T, dtype=float)
    if max_rank < 1:
        raise ValueError("max_rank must be at least 1")
    if T.ndim == 2:
        U, s, Vt = truncated_svd(T, rank=max_rank)
        return Tucker(np.diag(s), [U, Vt.T.copy()], [s, s.copy()])
    G = T
    factors, sigmas = [], []
    for m in range(T.ndim):
        U, s, _ = truncated_svd(mode_unfold(G, m), rank=max_rank)
        factors.append(U)
        sigmas.append(s)
        G = mode_product(G, U.T, m)
    return Tucker(G, factors, sigmas)

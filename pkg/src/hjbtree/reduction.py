"""Mode-wise model reduction: HO-POD bases, HO-DEIM interpolation,
operator reduction, low-rank node storage and basis serialization.

:class:`HoPod` and :class:`HoDeim` follow the scikit-learn estimator
protocol (``partial_fit`` per snapshot, ``fit`` over an iterable,
``get_params``/``set_params``, fitted attributes with a trailing
underscore), so they compose with standard tooling.  ``transform`` maps a
full tensor to reduced coordinates, ``inverse_transform`` lifts back.

The basis construction is dynamic: each accepted snapshot contributes the
factors of its rank-capped STHOSVD to per-mode accumulators, which are
reordered by singular value and truncated back to the cap.  Finalization
takes the SVD of each accumulator and keeps the leading vectors whose
discarded tail passes the relative energy test.
"""

import json

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator

from .errors import NumericalError
from .tensors import Tucker, multi_mode_product, sthosvd, tail_rank, truncated_svd
from ._validation import check_fitted

__all__ = [
    "HoPod",
    "HoDeim",
    "qdeim",
    "ReducedModel",
    "ReducedSystem",
    "reduce_model",
    "reduce_system",
    "node_codec",
    "save_reduction",
    "load_reduction",
]

FORMAT_VERSION = 1


class HoPod(BaseEstimator):
    """Mode-wise orthonormal basis grown dynamically from snapshots.

    Parameters
    ----------
    max_rank : int
        Per-mode cap on basis and accumulator size.
    trunc_tol : float
        Relative discarded-energy tolerance of the final truncation.
    snapshot_tol : float or None
        Projection-error threshold deciding snapshot inclusion in
        :meth:`consider`; defaults to ``trunc_tol``.

    Attributes
    ----------
    factors_ : list of ndarray
        Final orthonormal per-mode bases (after :meth:`finalize`).
    ranks_ : tuple
        Retained rank per mode.
    singular_values_ : list of ndarray
        Full accumulator spectra the truncation was read from.
    """

    def __init__(self, max_rank=20, trunc_tol=1e-4, snapshot_tol=None):
        self.max_rank = max_rank
        self.trunc_tol = trunc_tol
        self.snapshot_tol = snapshot_tol

    # -- accumulation --------------------------------------------------

    def _reset(self, order):
        self._order = order
        self._acc_v = [None] * order
        self._acc_s = [None] * order
        self._work = None
        self.n_snapshots_in_ = 0
        self.finalized_ = False

    def _require_order(self, Y):
        Y = np.asarray(Y, dtype=float)
        if not hasattr(self, "_order"):
            self._reset(Y.ndim)
        elif Y.ndim != self._order:
            raise ValueError(
                f"snapshot order {Y.ndim} does not match basis order {self._order}"
            )
        return Y

    def projection_error(self, Y):
        """Relative error of projecting ``Y`` on the current basis.

        Uses the finalized basis if available, otherwise an orthonormalized
        view of the accumulators.  A zero tensor reports error 0; with no
        basis at all the error is 1.
        """
        Y = self._require_order(Y)
        nrm = float(np.linalg.norm(Y.ravel()))
        if nrm == 0.0:
            return 0.0
        mats = self.factors_ if getattr(self, "finalized_", False) else self._work
        if mats is None:
            return 1.0
        resid = Y - multi_mode_product(
            multi_mode_product(Y, mats, transpose=True), mats
        )
        return float(np.linalg.norm(resid.ravel()) / nrm)

    def wants(self, Y):
        """Snapshot-inclusion test: projection error above the threshold."""
        tol = self.trunc_tol if self.snapshot_tol is None else self.snapshot_tol
        return self.projection_error(Y) > tol

    def consider(self, Y):
        """Apply the inclusion test and update on acceptance.

        Returns True when the snapshot was folded into the accumulators.
        """
        if self.wants(Y):
            self.partial_fit(Y)
            return True
        return False

    def partial_fit(self, Y):
        """Unconditionally fold one snapshot into the accumulators."""
        Y = self._require_order(Y)
        if getattr(self, "finalized_", False):
            raise RuntimeError("basis is finalized; no further updates allowed")
        if not np.any(Y):
            return self  # zero snapshot contributes nothing
        t = sthosvd(Y, self.max_rank)
        for m in range(self._order):
            U, s = t.factors[m], t.sigmas[m]
            # drop numerically-zero directions so roundoff vectors never
            # pollute the accumulators
            keep = s > 1e-13 * s[0] if len(s) else s > 0
            U, s = U[:, keep], s[keep]
            if self._acc_v[m] is None:
                V, sig = U, s
            else:
                V = np.hstack([self._acc_v[m], U])
                sig = np.concatenate([self._acc_s[m], s])
            order = np.argsort(-sig, kind="stable")[: self.max_rank]
            self._acc_v[m] = V[:, order]
            self._acc_s[m] = sig[order]
        self._work = [scipy.linalg.orth(V) for V in self._acc_v]
        self.n_snapshots_in_ += 1
        return self

    def finalize(self):
        """Fix the basis: SVD of each accumulator, truncated by energy."""
        if not getattr(self, "n_snapshots_in_", 0):
            raise RuntimeError("cannot finalize a basis without snapshots")
        factors, ranks, spectra = [], [], []
        for V in self._acc_v:
            U, s, _ = truncated_svd(V)
            k = max(tail_rank(s, self.trunc_tol), 1)
            k = min(k, self.max_rank)
            factors.append(U[:, :k])
            ranks.append(k)
            spectra.append(s)
        self.factors_ = factors
        self.ranks_ = tuple(ranks)
        self.singular_values_ = spectra
        self.finalized_ = True
        return self

    def fit(self, snapshots, y=None):
        """Run the dynamic inclusion loop over an iterable of snapshots."""
        first = True
        for Y in snapshots:
            if first:
                self._reset(np.asarray(Y).ndim)
                first = False
            self.consider(Y)
        return self.finalize()

    # -- projection ----------------------------------------------------

    def transform(self, Y):
        """Project a full tensor onto the reduced coordinates."""
        check_fitted(self, "finalized_")
        return multi_mode_product(np.asarray(Y, dtype=float), self.factors_,
                                  transpose=True)

    def inverse_transform(self, Yhat):
        """Lift reduced coordinates back to the full space."""
        check_fitted(self, "finalized_")
        return multi_mode_product(np.asarray(Yhat, dtype=float), self.factors_)

    @property
    def full_dims(self):
        check_fitted(self, "finalized_")
        return tuple(V.shape[0] for V in self.factors_)


def qdeim(Phi):
    """Interpolation rows of an orthonormal basis via pivoted QR.

    Returns the first ``p`` column pivots of a QR factorization of
    ``Phi.T`` (sorted for reproducibility); the selected square block
    ``Phi[rows, :]`` is guaranteed well conditioned for orthonormal input.
    """
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim != 2 or Phi.shape[1] > Phi.shape[0]:
        raise ValueError("expected a tall matrix of basis columns")
    _, R, piv = scipy.linalg.qr(Phi.T, pivoting=True, mode="economic")
    p = Phi.shape[1]
    diag = np.abs(np.diagonal(R))[:p]
    if diag.min() < 1e-12 * max(diag.max(), 1e-300):
        raise NumericalError("rank-deficient basis passed to qdeim")
    return np.sort(piv[:p])


class HoDeim(BaseEstimator):
    """Mode-wise DEIM approximation of the nonlinear term.

    Snapshots of the nonlinearity are accumulated exactly like
    :class:`HoPod`; finalization additionally selects interpolation rows
    per mode with :func:`qdeim` and records the growth constant
    ``prod_m ||inv(Phi_m[rows_m, :])||_2`` entering the error bound.

    Attributes
    ----------
    interp_factors_ : list of ndarray
        Orthonormal per-mode interpolation bases.
    sample_indices_ : list of ndarray
        Selected row indices per mode.
    growth_const_ : float
        Product of the per-mode inverse-block norms.
    """

    def __init__(self, max_rank=20, trunc_tol=1e-4, snapshot_tol=None):
        self.max_rank = max_rank
        self.trunc_tol = trunc_tol
        self.snapshot_tol = snapshot_tol

    def _pod(self):
        if not hasattr(self, "_pod_"):
            self._pod_ = HoPod(self.max_rank, self.trunc_tol, self.snapshot_tol)
        return self._pod_

    def partial_fit(self, F_value):
        self._pod().partial_fit(F_value)
        return self

    def fit(self, snapshots, y=None):
        for F_value in snapshots:
            self.partial_fit(F_value)
        return self.finalize()

    def finalize(self):
        pod = self._pod().finalize()
        self.interp_factors_ = pod.factors_
        self.singular_values_ = pod.singular_values_
        self.sample_indices_ = [qdeim(Phi) for Phi in self.interp_factors_]
        self.selected_blocks_ = [
            Phi[idx, :] for Phi, idx in zip(self.interp_factors_, self.sample_indices_)
        ]
        self.growth_const_ = float(
            np.prod([np.linalg.norm(np.linalg.inv(B), 2) for B in self.selected_blocks_])
        )
        self.ranks_ = pod.ranks_
        self.finalized_ = True
        return self

    def sample(self, Y):
        """Restrict a full tensor to the DEIM sample grid."""
        check_fitted(self, "finalized_")
        return Y[np.ix_(*self.sample_indices_)]

    def interpolate(self, values):
        """Full-space DEIM interpolant from values on the sample grid."""
        check_fitted(self, "finalized_")
        mats = [
            Phi @ np.linalg.inv(B)
            for Phi, B in zip(self.interp_factors_, self.selected_blocks_)
        ]
        return multi_mode_product(np.asarray(values, dtype=float), mats)


class ReducedModel:
    """Reduced twin of a :class:`~hjbtree.dynamics.SemilinearModel`.

    Carries the projected per-mode operators and, when a DEIM basis is
    supplied, the small sampled-evaluation factors that make one
    nonlinearity evaluation independent of the full dimension.  The duck
    interface (``lin_mats``, ``dims``, ``nonlinear_value``) matches the
    full model, so :class:`~hjbtree.dynamics.SemiImplicitStepper` and the
    tree machinery run unchanged on reduced states.
    """

    def __init__(self, model, basis, deim=None):
        check_fitted(basis, "finalized_")
        if tuple(basis.full_dims) != tuple(model.dims):
            raise ValueError("basis dimensions do not match the model")
        self.model = model
        self.basis = basis
        self.deim = deim
        V = basis.factors_
        self.lin_mats = [V[m].T @ A @ V[m] for m, A in enumerate(model.lin_mats)]
        self.dims = basis.ranks_
        if deim is not None:
            check_fitted(deim, "finalized_")
            self._bind_sampling(deim, basis, model)

    def _bind_sampling(self, deim, basis, model):
        idx = deim.sample_indices_
        V = basis.factors_
        # V_m^T Phi_m (P_m^T Phi_m)^{-1}: combine sampled values into
        # reduced coordinates, mode by mode
        self.combine_mats_ = [
            (V[m].T @ Phi) @ np.linalg.inv(B)
            for m, (Phi, B) in enumerate(zip(deim.interp_factors_, deim.selected_blocks_))
        ]
        self.sampled_state_mats_ = [V[m][idx[m], :] for m in range(len(V))]
        self.sampled_deriv_mats_ = [
            None if B is None else (B @ V[m])[idx[m], :]
            for m, B in enumerate(model.deriv_mats)
        ]
        self.sampled_fields_ = {
            name: np.asarray(field)[np.ix_(*idx)]
            for name, field in model.fields.items()
        }

    # -- projections ----------------------------------------------------

    def project(self, Y):
        return self.basis.transform(Y)

    def lift(self, Yhat):
        return self.basis.inverse_transform(Yhat)

    # -- dynamics interface ----------------------------------------------

    def _sampled_context(self, Yhat, u, t):
        sampled = multi_mode_product(Yhat, self.sampled_state_mats_)

        def deriv(mode, comp):
            B = self.sampled_deriv_mats_[mode]
            if B is None:
                return np.zeros(sampled.shape)
            mats = list(self.sampled_state_mats_)
            mats[mode] = B
            return multi_mode_product(Yhat, mats)

        from .dynamics import EvalContext

        return EvalContext([sampled], u, t, comp=0, deriv=deriv,
                           fields=self.sampled_fields_)

    def nonlinear_value(self, Yhat, u, t):
        """Reduced nonlinearity: DEIM-sampled when bound, else projected.

        Without DEIM the full nonlinearity is evaluated on the lifted
        state and projected back (the exact reduced evaluation the DEIM
        route approximates).
        """
        if self.model.nonlinear is None:
            return np.zeros(self.dims)
        Yhat = np.asarray(Yhat, dtype=float)
        if self.deim is None:
            full = self.model.nonlinear_value(self.lift(Yhat), u, t)
            return self.project(full)
        values = np.asarray(self.model.nonlinear(self._sampled_context(Yhat, u, t)),
                            dtype=float)
        return multi_mode_product(values, self.combine_mats_)


class ReducedSystem:
    """Reduced twin of a :class:`~hjbtree.dynamics.SystemOfModels`.

    Component ranks may differ, so a packed reduced state is the
    concatenation of the vectorized component tensors.  Sibling states
    needed by coupled nonlinearities are sampled on each component's DEIM
    grid through precomputed cross-basis factors.
    """

    def __init__(self, system, bases, deims=None):
        n = len(system.components)
        if len(bases) != n or (deims is not None and len(deims) != n):
            raise ValueError("need one basis (and DEIM basis) per component")
        deims = deims or [None] * n
        self.system = system
        self.components = [
            ReducedModel(c, b, d)
            for c, b, d in zip(system.components, bases, deims)
        ]
        self._shapes = [c.dims for c in self.components]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)])
        # cross-component sampling: component k's basis restricted to
        # component i's sample rows, one matrix per mode
        self.cross_state_mats_ = {}
        if any(d is not None for d in deims):
            for i, di in enumerate(deims):
                if di is None:
                    continue
                for k, bk in enumerate(bases):
                    self.cross_state_mats_[(i, k)] = [
                        bk.factors_[m][di.sample_indices_[m], :]
                        for m in range(len(bk.factors_))
                    ]

    def pack(self, states):
        return np.concatenate([np.ravel(s, order="F") for s in states])

    def unpack(self, state):
        state = np.asarray(state)
        return [
            np.reshape(state[self._offsets[i]:self._offsets[i + 1]],
                       self._shapes[i], order="F")
            for i in range(len(self.components))
        ]

    def project(self, states):
        return self.pack([c.project(s) for c, s in
                          zip(self.components, states)])

    def lift(self, state):
        return [c.lift(s) for c, s in zip(self.components, self.unpack(state))]

    def _sampled_context(self, states, u, t, comp):
        rm = self.components[comp]

        sampled = [
            multi_mode_product(states[k], self.cross_state_mats_[(comp, k)])
            for k in range(len(self.components))
        ]

        def deriv(mode, c):
            if c != comp:
                raise ValueError(
                    "sampled derivatives are available for the evaluated "
                    "component only"
                )
            B = rm.sampled_deriv_mats_[mode]
            if B is None:
                return np.zeros(sampled[comp].shape)
            mats = list(rm.sampled_state_mats_)
            mats[mode] = B
            return multi_mode_product(states[comp], mats)

        from .dynamics import EvalContext

        return EvalContext(sampled, u, t, comp=comp, deriv=deriv,
                           fields=rm.sampled_fields_)

    def nonlinear_value(self, states, u, t, comp):
        rm = self.components[comp]
        if rm.model.nonlinear is None:
            return np.zeros(rm.dims)
        if rm.deim is None:
            lifted = [c.lift(s) for c, s in zip(self.components, states)]
            full = self.system.nonlinear_value(lifted, u, t, comp)
            return rm.project(full)
        values = np.asarray(
            rm.model.nonlinear(self._sampled_context(states, u, t, comp)),
            dtype=float)
        return multi_mode_product(values, rm.combine_mats_)


def reduce_model(model, basis, deim=None):
    """Project a model onto a finalized basis (optionally DEIM-bound)."""
    return ReducedModel(model, basis, deim)


def reduce_system(system, bases, deims=None):
    return ReducedSystem(system, bases, deims)


# ---------------------------------------------------------------- storage


def node_codec(model, max_rank):
    """Encode/decode/measure triple for low-rank tree-node storage.

    States of order >= 2 are stored as rank-capped Tucker compressions
    (one per component for systems), reducing a node's footprint from the
    product to the sum of the mode sizes; vectors are kept as they are.
    """
    is_system = hasattr(model, "components")

    def encode(state):
        if is_system:
            return [sthosvd(s, max_rank) for s in model.unpack(state)]
        if np.ndim(state) < 2:
            return np.asarray(state, dtype=float)
        return sthosvd(np.asarray(state, dtype=float), max_rank)

    def decode(node):
        if is_system:
            return model.pack([t.to_dense() for t in node])
        if isinstance(node, Tucker):
            return node.to_dense()
        return node

    def size(node):
        if is_system:
            return sum(t.storage_size() for t in node)
        if isinstance(node, Tucker):
            return node.storage_size()
        return int(np.size(node))

    return encode, decode, size


# ------------------------------------------------------------ persistence


def _pod_payload(prefix, pod, payload):
    payload[f"{prefix}nmodes"] = np.array(len(pod.factors_))
    for m, (V, s) in enumerate(zip(pod.factors_, pod.singular_values_)):
        payload[f"{prefix}V{m}"] = V
        payload[f"{prefix}s{m}"] = s


def _pod_restore(prefix, data, params):
    pod = HoPod(**params)
    n = int(data[f"{prefix}nmodes"])
    pod.factors_ = [data[f"{prefix}V{m}"] for m in range(n)]
    pod.singular_values_ = [data[f"{prefix}s{m}"] for m in range(n)]
    pod.ranks_ = tuple(V.shape[1] for V in pod.factors_)
    pod._reset(n)
    pod.finalized_ = True
    return pod


def save_reduction(path, bases, deims=None, meta=None):
    """Serialize finalized bases to a single versioned binary container.

    ``bases`` is a list with one :class:`HoPod` per component, ``deims``
    an equally long list of :class:`HoDeim` or ``None`` entries.  ``meta``
    is an arbitrary JSON-serializable dict stored alongside.
    """
    deims = deims or [None] * len(bases)
    payload = {"format_version": np.array(FORMAT_VERSION),
               "n_components": np.array(len(bases))}
    record = {"meta": meta or {}, "components": []}
    for i, (pod, deim) in enumerate(zip(bases, deims)):
        check_fitted(pod, "finalized_")
        _pod_payload(f"c{i}_state_", pod, payload)
        entry = {"params": pod.get_params(), "deim": None}
        if deim is not None:
            check_fitted(deim, "finalized_")
            _pod_payload(f"c{i}_interp_", deim._pod_, payload)
            for m, idx in enumerate(deim.sample_indices_):
                payload[f"c{i}_rows{m}"] = np.asarray(idx)
            entry["deim"] = deim.get_params()
        record["components"].append(entry)
    payload["record_json"] = np.frombuffer(
        json.dumps(record, sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **payload)


def load_reduction(path):
    """Inverse of :func:`save_reduction`; returns (bases, deims, meta)."""
    data = np.load(path, allow_pickle=False)
    version = int(data["format_version"])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported basis container version {version}")
    record = json.loads(bytes(data["record_json"]).decode())
    bases, deims = [], []
    for i, entry in enumerate(record["components"]):
        bases.append(_pod_restore(f"c{i}_state_", data, entry["params"]))
        if entry["deim"] is None:
            deims.append(None)
            continue
        deim = HoDeim(**entry["deim"])
        pod = _pod_restore(f"c{i}_interp_", data, entry["deim"])
        deim._pod_ = pod
        deim.interp_factors_ = pod.factors_
        deim.singular_values_ = pod.singular_values_
        n = len(pod.factors_)
        deim.sample_indices_ = [data[f"c{i}_rows{m}"] for m in range(n)]
        deim.selected_blocks_ = [
            Phi[idx, :]
            for Phi, idx in zip(deim.interp_factors_, deim.sample_indices_)
        ]
        deim.growth_const_ = float(np.prod(
            [np.linalg.norm(np.linalg.inv(B), 2) for B in deim.selected_blocks_]
        ))
        deim.ranks_ = pod.ranks_
        deim.finalized_ = True
        deims.append(deim)
    return bases, deims, record["meta"]

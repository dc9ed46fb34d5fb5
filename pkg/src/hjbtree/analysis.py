"""A-posteriori error machinery for the reduced dynamics and value function.

The reduced semi-implicit trajectory satisfies, under the step-size
condition ``dt * mu < 1`` on the logarithmic norm of the reduced linear
operator, a bound of the form

    sum_k ||y_k - lift(yhat_k)||^2  <=  C * (E_state + E_nonlin)

where the right-hand side collects the squared projection residuals of
the state and nonlinearity snapshots outside their bases.  The value
functions of the full and reduced trees then differ by at most
``C * (dt + E_state + E_nonlin)``.  This module evaluates every constant
of those bounds from small per-mode factorizations, checks the step-size
gate, and reports both sides of each inequality.
"""

from dataclasses import dataclass, asdict
from functools import reduce
from math import prod

import numpy as np

from .errors import NumericalError
from .tensors import multi_mode_product
from ._validation import check_fitted, check_square

__all__ = [
    "log_norm",
    "ErrorBudget",
    "compute_budget",
    "estimate_f_lipschitz",
    "projection_residuals",
    "verify_state_bound",
    "verify_value_bound",
]


def log_norm(A):
    """Euclidean logarithmic norm: largest eigenvalue of ``(A + A^T)/2``."""
    A = check_square(A)
    return float(np.linalg.eigvalsh((A + A.T) / 2.0).max())


@dataclass
class ErrorBudget:
    """Constants of the reduced-trajectory error bound.

    ``bound_const`` multiplies the projection residuals in the state
    bound and ``dt + residuals`` in the value bound.  ``implicit_factor``
    is the gain of the implicit linear half-step, ``explicit_factor`` of
    the explicit nonlinear one, ``step_sum`` their accumulated geometric
    sum over the horizon.
    """

    dt: float
    horizon: float
    n_steps: int
    reduced_log_norm: float
    implicit_factor: float
    lipschitz_const: float
    lipschitz_gain: float
    explicit_factor: float
    step_sum: float
    state_gain: float
    interp_gain: float
    growth_const: float
    bound_const: float
    linear_norm: float
    interp_norm: float
    exact_linear_norm: bool
    lipschitz_estimated: bool

    def to_dict(self):
        return asdict(self)


def _dense_basis(factors):
    return reduce(np.kron, [np.asarray(V) for V in reversed(list(factors))])


def estimate_f_lipschitz(model, states, controls, times=None):
    """Sampled difference-quotient estimate of the nonlinearity's constant.

    Scans consecutive state pairs for every supplied control value and
    returns the largest ratio ``||f(a) - f(b)|| / ||a - b||``.  A lower
    bound on the true constant; reports flag it as estimated.
    """
    states = [np.asarray(s, dtype=float) for s in states]
    if len(states) < 2:
        raise ValueError("need at least two states to estimate a Lipschitz constant")
    times = times if times is not None else [0.0] * len(states)
    best = 0.0
    for u in np.atleast_1d(controls):
        vals = [model.nonlinear_value(s, float(u), t) for s, t in zip(states, times)]
        for (a, fa), (b, fb) in zip(zip(states, vals), zip(states[1:], vals[1:])):
            gap = np.linalg.norm((a - b).ravel())
            if gap > 1e-12:
                best = max(best, float(np.linalg.norm((fa - fb).ravel()) / gap))
    return best


def compute_budget(model, basis, deim=None, *, dt, horizon, f_lip=None,
                   trajectory_states=None, controls=(0.0,), dense_cap=10**4):
    """Evaluate every constant of the error bound for one reduced model.

    The step-size hypothesis ``dt * mu(reduced operator) < 1`` is checked
    first and violated configurations are refused.  ``f_lip`` may be
    supplied (from problem metadata) or estimated by difference quotients
    over ``trajectory_states``.  Norms involving the Kronecker-product
    interpolation operator factor exactly per mode; the norm of the
    projected full operator is computed densely below ``dense_cap``
    unknowns and replaced by its per-mode upper bound above.
    """
    check_fitted(basis, "finalized_")
    V = basis.factors_
    reduced_mats = [V[m].T @ A @ V[m] for m, A in enumerate(model.lin_mats)]
    mu = sum(log_norm(Ah) for Ah in reduced_mats)
    if dt * mu >= 1.0:
        raise NumericalError(
            f"step-size hypothesis violated: dt * mu = {dt * mu:.6g} >= 1"
        )
    implicit_factor = 1.0 / (1.0 - dt * mu)

    # Lipschitz constant of the nonlinearity
    estimated = False
    if f_lip is None:
        f_lip = getattr(model.lipschitz, "f_lip", None)
    if f_lip is None:
        if model.nonlinear is None:
            f_lip = 0.0
        else:
            if trajectory_states is None:
                raise ValueError(
                    "f_lip not supplied and no trajectory states to estimate from"
                )
            f_lip = estimate_f_lipschitz(model, trajectory_states, controls)
            estimated = True

    # ||V^T P||: exact per-mode Kronecker factorization of the DEIM operator
    if deim is not None:
        check_fitted(deim, "finalized_")
        interp_norm = 1.0
        for m, (Phi, block) in enumerate(zip(deim.interp_factors_,
                                             deim.selected_blocks_)):
            n = Phi.shape[0]
            P = np.zeros((n, Phi.shape[1]))
            P[deim.sample_indices_[m], np.arange(Phi.shape[1])] = 1.0
            oblique = Phi @ np.linalg.inv(block) @ P.T
            interp_norm *= float(np.linalg.norm(V[m].T @ oblique, 2))
        growth_const = float(deim.growth_const_)
        interp_gain = growth_const  # times ||V^T||_2 = 1 for orthonormal V
    else:
        interp_norm = 1.0  # exact evaluation: the projector is the identity
        growth_const = 1.0
        interp_gain = 0.0  # no interpolation error term
    lipschitz_gain = float(f_lip) * interp_norm

    explicit_factor = 1.0 + dt * lipschitz_gain
    n_steps = int(round((horizon) / dt))
    g = (implicit_factor * explicit_factor) ** 2
    if abs(g - 1.0) < 1e-14:
        step_sum = float(n_steps)
    else:
        step_sum = float((g**n_steps - 1.0) / (g - 1.0))

    # || V^T L ||_2 with L the Kronecker sum of the per-mode operators
    N = prod(model.dims)
    if N <= dense_cap:
        L = model.dense_linear(max_dim=dense_cap)
        VY = _dense_basis(V)
        linear_norm = float(np.linalg.norm(VY.T @ L, 2))
        exact = True
    else:
        linear_norm = float(sum(np.linalg.norm(V[m].T @ A, 2)
                                for m, A in enumerate(model.lin_mats)))
        exact = False
    state_gain = linear_norm + lipschitz_gain

    common = 2.0 * step_sum * implicit_factor**2 * horizon * dt
    bound_const = max(1.0 + common * state_gain**2, common * interp_gain**2)
    return ErrorBudget(
        dt=float(dt), horizon=float(horizon), n_steps=n_steps,
        reduced_log_norm=float(mu), implicit_factor=float(implicit_factor),
        lipschitz_const=float(f_lip), lipschitz_gain=float(lipschitz_gain),
        explicit_factor=float(explicit_factor), step_sum=step_sum,
        state_gain=float(state_gain), interp_gain=float(interp_gain),
        growth_const=growth_const, bound_const=float(bound_const),
        linear_norm=linear_norm, interp_norm=float(interp_norm),
        exact_linear_norm=exact, lipschitz_estimated=estimated,
    )


def _orthonormal_residual(Y, factors):
    Y = np.asarray(Y, dtype=float)
    proj = multi_mode_product(multi_mode_product(Y, factors, transpose=True),
                              factors)
    return float(np.sum((Y - proj) ** 2))


def projection_residuals(basis, f_basis, states, f_values):
    """Squared residual sums of states and nonlinearity snapshots.

    ``E_state = sum_j ||y_j - proj(y_j)||^2`` over the supplied states and
    ``E_nonlin`` the analogue over nonlinearity evaluations in the
    interpolation basis.  Either list may be empty.
    """
    check_fitted(basis, "finalized_")
    e_state = sum(_orthonormal_residual(y, basis.factors_) for y in states)
    e_nonlin = 0.0
    if f_values:
        if f_basis is None:
            raise ValueError("nonlinearity snapshots supplied without a basis")
        factors = getattr(f_basis, "interp_factors_", None)
        if factors is None:
            check_fitted(f_basis, "finalized_")
            factors = f_basis.factors_
        e_nonlin = sum(_orthonormal_residual(f, factors) for f in f_values)
    return float(e_state), float(e_nonlin)


def verify_state_bound(full_states, reduced_states, f_values, basis, f_basis,
                       budget):
    """Check the trajectory bound along one control sequence.

    ``full_states`` and ``reduced_states`` are the full-order and reduced
    trajectories under the same controls (initial state included);
    ``f_values`` the full-order nonlinearity snapshots along the path.
    Returns a report with both sides of the inequality; a violated bound
    is reported, never raised.
    """
    if len(full_states) != len(reduced_states):
        raise ValueError("trajectories must have equal length")
    lhs = sum(
        float(np.sum((np.asarray(y) - basis.inverse_transform(yh)) ** 2))
        for y, yh in zip(full_states, reduced_states)
    )
    e_state, e_nonlin = projection_residuals(basis, f_basis, full_states, f_values)
    bound = budget.bound_const * (e_state + e_nonlin)
    passed = lhs <= bound * (1.0 + 1e-9) + 1e-14
    return {
        "kind": "state_bound",
        "lhs": lhs,
        "state_residual": e_state,
        "nonlin_residual": e_nonlin,
        "bound": bound,
        "slack_ratio": lhs / bound if bound > 0 else (0.0 if lhs == 0 else np.inf),
        "passed": bool(passed),
        "budget": budget.to_dict(),
    }


def verify_value_bound(full_value, reduced_value, e_state, e_nonlin, budget):
    """Check the value-function bound at the tree root."""
    gap = abs(float(full_value) - float(reduced_value))
    bound = budget.bound_const * (budget.dt + e_state + e_nonlin)
    return {
        "kind": "value_bound",
        "full_value": float(full_value),
        "reduced_value": float(reduced_value),
        "gap": gap,
        "state_residual": float(e_state),
        "nonlin_residual": float(e_nonlin),
        "bound": bound,
        "slack_ratio": gap / bound if bound > 0 else (0.0 if gap == 0 else np.inf),
        "passed": bool(gap <= bound * (1.0 + 1e-9) + 1e-14),
        "budget": budget.to_dict(),
    }

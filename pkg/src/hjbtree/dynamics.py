"""Semilinear dynamics in array form and their semi-implicit integration.

A model keeps one linear operator per spatial mode plus a nonlinear
evaluator, so a state is an order-``d`` tensor ``Y`` evolving as

    dY/dt = sum_m Y x_m A_m + F(grad Y, Y, u, t).

One semi-implicit Euler step treats the mode-wise linear part implicitly
and the nonlinearity explicitly, which requires solving

    X - dt * sum_m X x_m A_m = RHS

at every step.  :class:`ShiftedSolver` factors the per-mode matrices once
(orthogonal eigendecomposition when symmetric, complex Schur otherwise)
and solves the transformed system by elementwise division or a triangular
sweep, so repeated steps cost a handful of mode products each.
"""

from dataclasses import dataclass
from functools import reduce
from math import prod

import numpy as np
import scipy.linalg

from .errors import CapExceeded, ConfigError, NumericalError
from .tensors import mode_product
from ._validation import check_square, check_tensor

__all__ = [
    "fd_operators",
    "EvalContext",
    "LipschitzInfo",
    "SemilinearModel",
    "SystemOfModels",
    "IntegratorConfig",
    "ShiftedSolver",
    "solve_shifted",
    "SemiImplicitStepper",
    "step_semi_implicit",
    "vectorized_reference_step",
    "dense_kron_sum",
    "bilinear_closed_form",
]


def fd_operators(n, bounds=(0.0, 1.0), bc="dirichlet", diffusion=0.0,
                 advection=0.0, scheme="upwind"):
    """Per-mode finite-difference operators on a uniform grid.

    Returns ``(A, B, h)``: ``A`` is the 3-point second difference scaled
    by ``diffusion / h^2`` plus the advection contribution ``-advection *
    (first difference)``, ``B`` is the centered first difference used by
    gradient-dependent nonlinearities, ``h`` the grid step.

    ``n`` counts unknowns: interior points under homogeneous Dirichlet
    conditions (``h = (b - a) / (n + 1)``, boundary values dropped) or all
    grid points under homogeneous Neumann conditions with mirrored ghost
    nodes (``h = (b - a) / (n - 1)``).

    Parameters
    ----------
    scheme : str
        Advection stencil, ``"upwind"`` (first order, direction taken
        from the sign of ``advection``) or ``"centered"``.
    """
    if n < 3:
        raise ValueError("need at least 3 grid points per mode")
    a, b = bounds
    if bc == "dirichlet":
        h = (b - a) / (n + 1)
    elif bc == "neumann":
        h = (b - a) / (n - 1)
    else:
        raise ValueError(f"unsupported boundary condition {bc!r}")

    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    D2 = (np.diag(main) + np.diag(off, 1) + np.diag(off, -1)) / h**2
    B = (np.diag(off, 1) - np.diag(off, -1)) / (2.0 * h)
    if bc == "neumann":
        # mirrored ghosts: y_{-1} = y_1 and y_n = y_{n-2}
        D2[0, 1] = 2.0 / h**2
        D2[-1, -2] = 2.0 / h**2
        B[0, :] = 0.0
        B[-1, :] = 0.0

    A = diffusion * D2
    c = float(advection)
    if c != 0.0:
        if scheme == "centered":
            A = A - c * B
        elif scheme == "upwind":
            U = np.zeros((n, n))
            if c > 0:  # backward difference
                U += np.eye(n) / h
                U -= np.diag(np.ones(n - 1), -1) / h
                if bc == "neumann":
                    U[0, 1] -= 1.0 / h
            else:  # forward difference
                U -= np.eye(n) / h
                U += np.diag(np.ones(n - 1), 1) / h
                if bc == "neumann":
                    U[-1, -2] += 1.0 / h
            A = A - c * U
        else:
            raise ValueError(f"unknown advection scheme {scheme!r}")
    return A, B, h


class EvalContext:
    """What a nonlinearity evaluator sees at one (state, control, time).

    The same interface is served with full tensors during full-order
    simulation and with sampled tensors during DEIM evaluation, so
    problem nonlinearities are written once.  ``states`` holds every
    component of a system (a single entry for scalar models); ``comp``
    is the component being evaluated.
    """

    def __init__(self, states, u, t, comp=0, deriv=None, fields=None):
        self.states = states
        self.u = u
        self.t = t
        self.comp = comp
        self._deriv = deriv
        self._fields = fields or {}
        self._cache = {}

    @property
    def y(self):
        """State of the component being evaluated."""
        return self.states[self.comp]

    def state(self, comp=None):
        return self.states[self.comp if comp is None else comp]

    def dmode(self, mode, comp=None):
        """First derivative of one component along one mode."""
        c = self.comp if comp is None else comp
        key = (mode, c)
        if key not in self._cache:
            self._cache[key] = self._deriv(mode, c)
        return self._cache[key]

    def dsum(self, comp=None):
        """Sum of the first derivatives over all modes."""
        c = self.comp if comp is None else comp
        return sum(self.dmode(m, c) for m in range(self.states[c].ndim))

    def field(self, name):
        """Static coefficient field evaluated on the (sampled) grid."""
        return self._fields[name]


@dataclass
class LipschitzInfo:
    """Optional Lipschitz constants and bounds used by the error analysis."""

    f_lip: float | None = None
    running_lip: float | None = None
    terminal_lip: float | None = None
    f_bound: float | None = None
    running_bound: float | None = None
    terminal_bound: float | None = None


class SemilinearModel:
    """Array-form semilinear system with one linear operator per mode.

    Parameters
    ----------
    lin_mats : list of ndarray
        Square per-mode matrices of the implicit linear part.
    deriv_mats : list of ndarray or None
        Per-mode first-derivative matrices consumed by gradient-dependent
        nonlinearities; ``None`` entries mean the mode is never
        differentiated.
    nonlinear : callable or None
        Evaluator ``f(ctx) -> tensor`` against :class:`EvalContext`;
        ``None`` for purely linear dynamics.
    fields : dict
        Named static coefficient tensors (full grid) that the evaluator
        may read via ``ctx.field(name)``.
    """

    def __init__(self, lin_mats, deriv_mats=None, nonlinear=None, *,
                 spacings=None, bounds=None, bc=None, fields=None,
                 lipschitz=None, control_dim=1):
        self.lin_mats = [check_square(A, "lin_mats entry") for A in lin_mats]
        self.dims = tuple(A.shape[0] for A in self.lin_mats)
        if deriv_mats is None:
            deriv_mats = [None] * len(self.dims)
        self.deriv_mats = [
            None if B is None else check_square(B, "deriv_mats entry")
            for B in deriv_mats
        ]
        for m, B in enumerate(self.deriv_mats):
            if B is not None and B.shape[0] != self.dims[m]:
                raise ValueError("deriv_mats sizes must match lin_mats")
        self.nonlinear = nonlinear
        self.spacings = tuple(spacings) if spacings is not None else (1.0,) * len(self.dims)
        self.bounds = bounds
        self.bc = bc
        self.fields = dict(fields) if fields else {}
        self.lipschitz = lipschitz or LipschitzInfo()
        self.control_dim = control_dim

    @property
    def order(self):
        return len(self.dims)

    @property
    def total_dim(self):
        return prod(self.dims)

    @property
    def cell_volume(self):
        return prod(self.spacings)

    def apply_linear(self, Y):
        """Mode-wise linear action ``sum_m Y x_m A_m``."""
        Y = check_tensor(Y, self.dims, "state")
        return sum(mode_product(Y, A, m) for m, A in enumerate(self.lin_mats))

    def apply_derivative(self, Y):
        """Summed first-derivative action ``sum_m Y x_m B_m``."""
        Y = check_tensor(Y, self.dims, "state")
        out = np.zeros(self.dims)
        for m, B in enumerate(self.deriv_mats):
            if B is not None:
                out += mode_product(Y, B, m)
        return out

    def derivative_mode(self, Y, mode):
        B = self.deriv_mats[mode]
        if B is None:
            return np.zeros(self.dims)
        return mode_product(Y, B, mode)

    def context(self, Y, u, t):
        return EvalContext(
            [Y], u, t, comp=0,
            deriv=lambda mode, comp: self.derivative_mode(Y, mode),
            fields=self.fields,
        )

    def nonlinear_value(self, Y, u, t):
        """Evaluate the nonlinearity at full order (zero tensor if absent)."""
        if self.nonlinear is None:
            return np.zeros(self.dims)
        out = np.asarray(self.nonlinear(self.context(Y, u, t)), dtype=float)
        if out.shape != tuple(self.dims):
            raise ValueError("nonlinearity returned a tensor of wrong shape")
        return out

    def dense_linear(self, max_dim=10**4):
        """Dense Kronecker-sum form of the linear operator (oracle use)."""
        return dense_kron_sum(self.lin_mats, max_dim=max_dim)

    def dense_derivative(self, max_dim=10**4):
        mats = [np.zeros((n, n)) if B is None else B
                for n, B in zip(self.dims, self.deriv_mats)]
        return dense_kron_sum(mats, max_dim=max_dim)


class SystemOfModels:
    """Coupled components sharing dims, time step and the control signal.

    The packed state is the components stacked along a leading axis.
    Each component's nonlinearity receives a context exposing every
    component's state, e.g. convective couplings read sibling states.
    """

    def __init__(self, components):
        if not components:
            raise ValueError("a system needs at least one component")
        dims = components[0].dims
        for c in components:
            if c.dims != dims:
                raise ValueError("all components must share dims")
        self.components = list(components)
        self.dims = dims

    @property
    def n_components(self):
        return len(self.components)

    @property
    def order(self):
        return len(self.dims)

    @property
    def total_dim(self):
        return self.n_components * prod(self.dims)

    @property
    def cell_volume(self):
        return self.components[0].cell_volume

    def pack(self, states):
        return np.stack([check_tensor(s, self.dims) for s in states])

    def unpack(self, state):
        state = np.asarray(state)
        if state.shape != (self.n_components, *self.dims):
            raise ValueError("packed system state has wrong shape")
        return [state[i] for i in range(self.n_components)]

    def context(self, states, u, t, comp):
        def deriv(mode, c):
            return self.components[c].derivative_mode(states[c], mode)

        return EvalContext(states, u, t, comp=comp, deriv=deriv,
                           fields=self.components[comp].fields)

    def nonlinear_value(self, states, u, t, comp):
        model = self.components[comp]
        if model.nonlinear is None:
            return np.zeros(self.dims)
        out = np.asarray(model.nonlinear(self.context(states, u, t, comp)), dtype=float)
        if out.shape != tuple(self.dims):
            raise ValueError("nonlinearity returned a tensor of wrong shape")
        return out


@dataclass
class IntegratorConfig:
    """Uniform time grid for the semi-implicit scheme."""

    dt: float
    t0: float = 0.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        span = self.horizon - self.t0
        if span <= 0:
            raise ConfigError("horizon must exceed t0")
        steps = round(span / self.dt)
        if steps < 1 or abs(steps * self.dt - span) > 1e-9 * max(1.0, abs(span)):
            raise ConfigError(
                f"(horizon - t0) = {span} is not an integer multiple of dt = {self.dt}"
            )
        self.n_steps = steps

    def times(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def _is_symmetric(A):
    scale = max(1.0, float(np.abs(A).max()))
    return np.allclose(A, A.T, atol=1e-13 * scale)


def _check_denominators(d, dt):
    bad = np.abs(d).min()
    if bad < 1e-13:
        raise NumericalError(
            f"shifted operator is numerically singular: min |1 - dt*lambda| = {bad:.3e} "
            f"with dt = {dt}"
        )


class ShiftedSolver:
    """Direct solver for ``X - dt * sum_m X x_m A_m = RHS``, factored once.

    Symmetric modes are reduced to diagonal form by an orthogonal
    eigendecomposition; general (possibly defective) modes use a complex
    Schur form.  When every mode is symmetric the transformed solve is a
    single elementwise division; otherwise an upper-triangular sweep over
    the modes is performed.
    """

    def __init__(self, mats, dt):
        self.dt = float(dt)
        self.dims = tuple(A.shape[0] for A in mats)
        self._q = []
        self._f = []  # 1-D array = diagonal factor, 2-D = upper triangular
        all_sym = True
        for A in mats:
            A = check_square(A)
            if _is_symmetric(A):
                w, Q = np.linalg.eigh(A)
                self._q.append(Q)
                self._f.append(w)
            else:
                T, Q = scipy.linalg.schur(A, output="complex")
                self._q.append(Q)
                self._f.append(T)
                all_sym = False
        self._diagonal_path = all_sym
        if all_sym:
            grids = np.meshgrid(*self._f, indexing="ij")
            den = 1.0 - self.dt * sum(grids)
            _check_denominators(den, self.dt)
            self._denom = den
        else:
            for f in self._f:
                diag = f if f.ndim == 1 else np.diagonal(f)
                # eager singularity diagnostic on the recursion's shifts
                _check_denominators(1.0 - self.dt * diag, self.dt)

    def solve(self, rhs):
        rhs = check_tensor(rhs, self.dims, "right-hand side")
        G = rhs
        for m, Q in enumerate(self._q):
            G = mode_product(G, Q.conj().T, m)
        if self._diagonal_path:
            X = G / self._denom
        else:
            X = _triangular_sweep(self._f, self.dt, G.astype(complex), 1.0)
        for m, Q in enumerate(self._q):
            X = mode_product(X, Q, m)
        return np.ascontiguousarray(X.real) if np.iscomplexobj(X) else X


def _triangular_sweep(factors, dt, G, shift):
    # Solve shift*X - dt * sum_m X x_m T_m = G where each T_m is upper
    # triangular (2-D) or diagonal (1-D).  Peels the last mode; the base
    # case is a single triangular or diagonal solve.
    f = factors[-1]
    if len(factors) == 1:
        if f.ndim == 1:
            den = shift - dt * f
            _check_denominators(den, dt)
            return G / den
        A = shift * np.eye(len(f), dtype=complex) - dt * f
        _check_denominators(np.diagonal(A), dt)
        return scipy.linalg.solve_triangular(A, G)
    n = G.shape[-1]
    X = np.empty(G.shape, dtype=complex)
    diagonal = f.ndim == 1
    for i in range(n - 1, -1, -1):
        g = G[..., i]
        if not diagonal and i + 1 < n:
            g = g + dt * np.tensordot(X[..., i + 1:], f[i, i + 1:], axes=([-1], [0]))
        fii = f[i] if diagonal else f[i, i]
        X[..., i] = _triangular_sweep(factors[:-1], dt, g, shift - dt * fii)
    return X


def solve_shifted(mats, dt, rhs):
    """One-shot convenience wrapper around :class:`ShiftedSolver`."""
    return ShiftedSolver(mats, dt).solve(rhs)


class SemiImplicitStepper:
    """Reusable semi-implicit Euler step for a model or system.

    The per-mode factorizations are computed once at construction, so a
    tree expansion pays only mode products per node.
    """

    def __init__(self, model, dt):
        self.model = model
        self.dt = float(dt)
        self._is_system = hasattr(model, "components")
        if self._is_system:
            self._solvers = [ShiftedSolver(c.lin_mats, dt) for c in model.components]
        else:
            self._solvers = [ShiftedSolver(model.lin_mats, dt)]

    def __call__(self, state, u, t):
        model = self.model
        dt = self.dt
        if self._is_system:
            states = model.unpack(state)
            out = []
            for i in range(len(model.components)):
                fval = model.nonlinear_value(states, u, t, i)
                if np.isnan(fval).any():
                    raise NumericalError("nonlinearity produced NaN during a step")
                out.append(self._solvers[i].solve(states[i] + dt * fval))
            return model.pack(out)
        Y = np.asarray(state, dtype=float)
        fval = model.nonlinear_value(Y, u, t)
        if np.isnan(fval).any():
            raise NumericalError("nonlinearity produced NaN during a step")
        return self._solvers[0].solve(Y + dt * fval)


def step_semi_implicit(model, Y, u, t, dt):
    """Single semi-implicit step; factors the solver on every call.

    Use :class:`SemiImplicitStepper` when stepping repeatedly.
    """
    return SemiImplicitStepper(model, dt)(Y, u, t)


def vectorized_reference_step(L, f, y, u, t, dt, max_dim=10**4):
    """Dense reference realization of one semi-implicit step.

    Solves ``(I - dt L) y_next = y + dt f(y, u, t)`` by a direct dense
    method; refused above ``max_dim`` unknowns.  Test oracle only.
    """
    L = np.asarray(L, dtype=float)
    N = L.shape[0]
    if N > max_dim:
        raise CapExceeded(f"dense reference step refused for dimension {N} > {max_dim}")
    y = np.asarray(y, dtype=float).reshape(N)
    rhs = y + dt * np.asarray(f(y, u, t), dtype=float).reshape(N)
    return np.linalg.solve(np.eye(N) - dt * L, rhs)


def dense_kron_sum(mats, max_dim=10**4):
    """Dense Kronecker-sum matrix of per-mode operators (oracle use).

    Uses the package's vectorization convention (first mode fastest);
    refused when the vectorized dimension exceeds ``max_dim``.
    """
    dims = [A.shape[0] for A in mats]
    N = prod(dims)
    if N > max_dim:
        raise CapExceeded(f"dense Kronecker sum refused for dimension {N} > {max_dim}")
    L = np.zeros((N, N))
    for m, A in enumerate(mats):
        factors = [np.eye(n) for n in dims]
        factors[m] = np.asarray(A, dtype=float)
        L += reduce(np.kron, reversed(factors))
    return L


def bilinear_closed_form(mats, y0, controls, dt):
    """Closed-form state of the semi-implicit bilinear recursion.

    For dynamics ``dy/dt = Ly + u y`` the scheme gives
    ``y_n = (I - dt L)^{-n} y_0 * prod_i (1 + dt u_i)``, realized here
    with one tensor-structured solve per step plus scalar accumulation.
    The result is invariant under permutations of ``controls``.
    """
    solver = ShiftedSolver(mats, dt)
    w = check_tensor(y0)
    coef = 1.0
    for u in controls:
        w = solver.solve(w)
        coef *= 1.0 + dt * float(u)
    return coef * w

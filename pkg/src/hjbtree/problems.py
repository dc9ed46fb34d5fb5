"""Packaged benchmark control problems and their cost functionals.

Each builder returns a :class:`ProblemSpec` bundling the dynamics, the
quadratic cost, the control box, the horizon and the initial state, with
defaults matching the published benchmark configurations:

``advdiff``
    Bilinear advection-diffusion on ``[-5, 5]^2`` with homogeneous
    Dirichlet conditions and multiplicative control.
``allen-cahn``
    Allen-Cahn reaction-diffusion on ``[-1, 1]^2`` with homogeneous
    Neumann conditions, steered toward the unstable zero equilibrium.
``burgers3d``
    Viscous Burgers system of three velocities on ``[0, 1]^3`` with one
    shared control signal.
``vanderpol``
    Two-dimensional Van der Pol oscillator integrated explicitly, used
    by the statistical-pruning demonstrations (no reduction).
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    LipschitzInfo,
    SemiImplicitStepper,
    SemilinearModel,
    SystemOfModels,
    fd_operators,
)

__all__ = [
    "CostSpec",
    "OdeModel",
    "ProblemSpec",
    "running_cost",
    "terminal_cost",
    "make_advection_diffusion",
    "make_allen_cahn",
    "make_burgers3d",
    "make_van_der_pol",
    "PRESETS",
    "build_problem",
]


@dataclass
class CostSpec:
    """Quadratic cost: rectangle-rule state quadrature plus control penalty.

    The running cost is ``state_weight * V * ||Y||_F^2 + control_weight *
    u^2`` with ``V`` the grid cell volume, the terminal cost
    ``terminal_weight * V * ||Y||_F^2``.  Because orthonormal lifting
    preserves the Frobenius norm, the same formulas evaluated on reduced
    coordinates reproduce the full-order cost exactly.
    """

    state_weight: float = 1.0
    control_weight: float = 0.0
    terminal_weight: float = 1.0
    cell_volume: float = 1.0

    def __post_init__(self):
        if min(self.state_weight, self.control_weight,
               self.terminal_weight, self.cell_volume) < 0:
            raise ValueError("cost weights must be nonnegative")

    def state_cost(self, Y):
        """Cached per-node quadrature ``V * ||Y||_F^2``."""
        Y = np.asarray(Y, dtype=float)
        return self.cell_volume * float(np.sum(Y * Y))

    def running(self, q, u, t):
        return self.state_weight * q + self.control_weight * float(u) ** 2

    def terminal(self, q):
        return self.terminal_weight * q


def running_cost(cost, Y, u, t=0.0):
    """Running cost evaluated directly on a (full or reduced) state."""
    return cost.running(cost.state_cost(Y), u, t)


def terminal_cost(cost, Y):
    return cost.terminal(cost.state_cost(Y))


@dataclass
class OdeModel:
    """Plain low-dimensional ODE stepped by explicit Euler (no reduction)."""

    rhs: callable
    dim: int

    def stepper(self, dt):
        def step(y, u, t):
            y = np.asarray(y, dtype=float)
            return y + dt * np.asarray(self.rhs(y, u, t), dtype=float)

        return step


@dataclass
class ProblemSpec:
    """A packaged control problem: dynamics, cost, control box, horizon."""

    name: str
    model: object
    cost: CostSpec
    control_box: tuple
    horizon: float
    dt: float
    initial_state: np.ndarray
    t0: float = 0.0
    bilinear: bool = False
    params: dict = field(default_factory=dict)

    def stepper(self, dt):
        """Discrete dynamics map ``(state, u, t) -> state`` at step ``dt``."""
        if isinstance(self.model, OdeModel):
            return self.model.stepper(dt)
        return SemiImplicitStepper(self.model, dt)

    def pack_initial(self):
        return np.asarray(self.initial_state, dtype=float)

    def to_dict(self):
        return {"preset": self.name, "params": dict(self.params)}

    @staticmethod
    def from_dict(d):
        return build_problem(d["preset"], **d.get("params", {}))


def _interior_grid(n, lo, hi):
    h = (hi - lo) / (n + 1)
    return lo + h * np.arange(1, n + 1), h


def make_advection_diffusion(n=101, velocity=(0.5, 0.0), diffusion=0.0,
                             control_box=(-3.0, -1.0), horizon=1.0, dt=0.05,
                             domain=(-5.0, 5.0), scheme="upwind"):
    """Bilinear advection-diffusion with multiplicative control.

    ``n`` interior points per direction on ``domain^2`` under homogeneous
    Dirichlet conditions; initial bump ``max(2 - |x|^2, 0)``; unit control
    penalty.  The dynamics is bilinear (``dy/dt = Ly + u y``), so the
    sum-based tree construction applies.
    """
    if n < 3:
        raise ValueError("need n >= 3")
    lin, deriv = [], []
    for m in range(2):
        A, B, h = fd_operators(n, bounds=domain, bc="dirichlet",
                               diffusion=diffusion, advection=velocity[m],
                               scheme=scheme)
        lin.append(A)
        deriv.append(B)
    x, h = _interior_grid(n, *domain)
    y0 = np.maximum(2.0 - (x[:, None] ** 2 + x[None, :] ** 2), 0.0)
    u_max = max(abs(control_box[0]), abs(control_box[1]))
    model = SemilinearModel(
        lin, deriv_mats=deriv,
        nonlinear=lambda ctx: ctx.u * ctx.y,
        spacings=(h, h), bounds=(domain, domain), bc=("dirichlet",) * 2,
        lipschitz=LipschitzInfo(f_lip=u_max),
    )
    return ProblemSpec(
        name="advdiff", model=model,
        cost=CostSpec(control_weight=1.0, cell_volume=h * h),
        control_box=tuple(control_box), horizon=horizon, dt=dt,
        initial_state=y0, bilinear=True,
        params=dict(n=n, velocity=tuple(velocity), diffusion=diffusion,
                    control_box=tuple(control_box), horizon=horizon, dt=dt,
                    domain=tuple(domain), scheme=scheme),
    )


def make_allen_cahn(n=601, diffusion=0.1, control_box=(-2.0, 0.0),
                    control_weight=0.01, horizon=1.0, dt=0.1,
                    domain=(-1.0, 1.0)):
    """Allen-Cahn equation steered toward the unstable zero state.

    ``n`` grid points per direction (boundaries included) on ``domain^2``
    with homogeneous Neumann conditions; the control acts through the
    initial profile as forcing ``y0(x) u``.
    """
    if n < 3:
        raise ValueError("need n >= 3")
    A, _, h = fd_operators(n, bounds=domain, bc="neumann", diffusion=diffusion)
    x = np.linspace(domain[0], domain[1], n)
    y0 = 2.0 + np.outer(np.cos(2 * np.pi * x), np.cos(2 * np.pi * x))

    def f(ctx):
        y = ctx.y
        return y * (1.0 - y * y) + ctx.field("forcing") * ctx.u

    model = SemilinearModel(
        [A, A], nonlinear=f, spacings=(h, h), bounds=(domain, domain),
        bc=("neumann",) * 2, fields={"forcing": y0},
    )
    return ProblemSpec(
        name="allen-cahn", model=model,
        cost=CostSpec(control_weight=control_weight, cell_volume=h * h),
        control_box=tuple(control_box), horizon=horizon, dt=dt,
        initial_state=y0,
        params=dict(n=n, diffusion=diffusion, control_box=tuple(control_box),
                    control_weight=control_weight, horizon=horizon, dt=dt,
                    domain=tuple(domain)),
    )


def make_burgers3d(n=60, reynolds=100.0, control_box=(-2.0, 0.0),
                   control_weight=0.1, horizon=1.0, dt=0.1):
    """Viscous Burgers system of three velocity components on the cube.

    ``n`` interior points per direction under homogeneous Dirichlet
    conditions; each component is advected by the full velocity field and
    forced multiplicatively by the shared control.
    """
    if n < 3:
        raise ValueError("need n >= 3")
    A, B, h = fd_operators(n, bounds=(0.0, 1.0), bc="dirichlet",
                           diffusion=1.0 / reynolds)
    x, _ = _interior_grid(n, 0.0, 1.0)
    s, c = np.sin(2 * np.pi * x), np.cos(2 * np.pi * x)
    initial = [
        0.1 * np.einsum("i,j,k->ijk", s, s, c),
        0.1 * np.einsum("i,j,k->ijk", s, c, s),
        0.1 * np.einsum("i,j,k->ijk", c, s, s),
    ]

    def convection(ctx):
        out = ctx.u * ctx.y
        for k in range(3):
            out = out - ctx.state(k) * ctx.dmode(k)
        return out

    comps = [
        SemilinearModel([A, A, A], deriv_mats=[B, B, B], nonlinear=convection,
                        spacings=(h, h, h), bc=("dirichlet",) * 3)
        for _ in range(3)
    ]
    system = SystemOfModels(comps)
    return ProblemSpec(
        name="burgers3d", model=system,
        cost=CostSpec(control_weight=control_weight, cell_volume=h**3),
        control_box=tuple(control_box), horizon=horizon, dt=dt,
        initial_state=system.pack(initial),
        params=dict(n=n, reynolds=reynolds, control_box=tuple(control_box),
                    control_weight=control_weight, horizon=horizon, dt=dt),
    )


def make_van_der_pol(omega=0.15, horizon=1.4, dt=0.2, x0=(0.4, -0.3),
                     control_box=(0.0, 1.0), control_weight=0.1):
    """Van der Pol oscillator, the statistical-pruning demonstration."""

    def rhs(y, u, t):
        return np.array([y[1], omega * (1.0 - y[0] ** 2) * y[1] - y[0] + u])

    return ProblemSpec(
        name="vanderpol", model=OdeModel(rhs, 2),
        cost=CostSpec(control_weight=control_weight),
        control_box=tuple(control_box), horizon=horizon, dt=dt,
        initial_state=np.asarray(x0, dtype=float),
        params=dict(omega=omega, horizon=horizon, dt=dt, x0=tuple(x0),
                    control_box=tuple(control_box),
                    control_weight=control_weight),
    )


PRESETS = {
    "advdiff": make_advection_diffusion,
    "allen-cahn": make_allen_cahn,
    "burgers3d": make_burgers3d,
    "vanderpol": make_van_der_pol,
}


def build_problem(preset, **overrides):
    """Instantiate a named preset with keyword overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset](**overrides)

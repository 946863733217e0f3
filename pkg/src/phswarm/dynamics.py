"""Open-loop port-Hamiltonian robot models and zero-order-hold integration.

Each robot follows ẋ = (J(x) − R(x)) ∂H/∂x + F(x) u with skew-symmetric
interconnection J, positive-semidefinite dissipation R, and input gain F.
Teams compose block-diagonally: the joint structure matrices stack per-robot
blocks and the joint energy is the sum of the per-robot energies, so the
joint system is itself port-Hamiltonian.

States are matrices with one row per robot. Integration is explicit Euler
with an optional diffusion term: s' = s + T f(s, u) + n, n ~ N(0, T LLᵀ)
applied per robot row.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, IntegrationError, StateError


def _as_fn(term, n_rows, n_cols, name):
    """Accept a constant matrix or a callable of the local state."""
    if callable(term):
        return term, None
    const = np.asarray(term, dtype=np.float64)
    if const.shape != (n_rows, n_cols):
        raise DimensionError(f"{name} must be {n_rows}x{n_cols}, got {const.shape}")
    return (lambda x, _c=const: _c), const


class RobotPhModel:
    """One robot's port-Hamiltonian structure.

    J, R, F may be constant matrices or callables of the robot's state
    vector; H and dH are callables (energy and its analytic gradient).
    """

    __slots__ = (
        "n_x", "n_u", "J", "R", "F", "H", "dH",
        "J_const", "R_const", "F_const", "dH_lin",
    )

    def __init__(self, n_x, n_u, J, R, F, H, dH, dH_lin=None):
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.J, self.J_const = _as_fn(J, n_x, n_x, "J")
        self.R, self.R_const = _as_fn(R, n_x, n_x, "R")
        self.F, self.F_const = _as_fn(F, n_x, n_u, "F")
        self.H = H
        self.dH = dH
        # when the energy gradient is linear, dH(x) = dH_lin @ x enables
        # whole-team matrix evaluation instead of per-robot calls
        self.dH_lin = None if dH_lin is None else np.asarray(dH_lin, dtype=np.float64)

    def is_constant(self):
        return (
            self.J_const is not None
            and self.R_const is not None
            and self.F_const is not None
        )


@dataclass(frozen=True)
class JointPhModel:
    models: tuple
    L: np.ndarray  # per-robot diffusion, n_x x n_x (zeros when noiseless)
    n: int
    n_x: int
    n_u: int


@dataclass(frozen=True)
class JointState:
    x: np.ndarray  # n x n_x
    t: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.x).all():
            raise StateError("joint state holds non-finite entries")


def compose(models, L=None):
    """Block-diagonal team composition; joint H is the sum of robot energies."""
    models = tuple(models)
    if not models:
        raise ContractError("compose needs at least one robot model")
    n_x, n_u = models[0].n_x, models[0].n_u
    for m in models:
        if (m.n_x, m.n_u) != (n_x, n_u):
            raise DimensionError("robot models disagree on state or input dims")
    if L is None:
        L = np.zeros((n_x, n_x))
    L = np.asarray(L, dtype=np.float64)
    if L.shape != (n_x, n_x):
        raise DimensionError(f"diffusion L must be {n_x}x{n_x}, got {L.shape}")
    return JointPhModel(models=models, L=L, n=len(models), n_x=n_x, n_u=n_u)


def joint_hamiltonian(m, x):
    x = np.asarray(x, dtype=np.float64)
    return float(sum(rm.H(x[i]) for i, rm in enumerate(m.models)))


def open_loop_flow(m, s, u):
    """ẋ = (J − R) ∂H/∂x + F u evaluated blockwise, one row per robot."""
    x = np.asarray(s.x if isinstance(s, JointState) else s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape != (m.n, m.n_x):
        raise DimensionError(f"state must be {m.n}x{m.n_x}, got {x.shape}")
    if u.shape != (m.n, m.n_u):
        raise DimensionError(f"input must be {m.n}x{m.n_u}, got {u.shape}")
    out = np.empty_like(x)
    with np.errstate(invalid="ignore", over="ignore"):
        for i, rm in enumerate(m.models):
            xi = x[i]
            out[i] = (rm.J(xi) - rm.R(xi)) @ rm.dH(xi) + rm.F(xi) @ u[i]
    return out


def zoh_step(m, s, u, T, rng=None):
    """Explicit Euler step with optional Gaussian process noise."""
    if T <= 0:
        raise ContractError("step size must be positive")
    f = open_loop_flow(m, s, u)
    x_next = s.x + T * f
    if rng is not None and np.any(m.L):
        noise = np.sqrt(T) * rng.standard_normal(x_next.shape) @ m.L.T
        x_next = x_next + noise
    if not np.isfinite(x_next).all():
        raise IntegrationError("integration produced non-finite state")
    return JointState(x=x_next, t=s.t + T)


def dense_terms(m, x):
    """Dense joint (J, R, F, dH) stacks, the oracle for blockwise flow."""
    n, n_x, n_u = m.n, m.n_x, m.n_u
    J = np.zeros((n * n_x, n * n_x))
    R = np.zeros((n * n_x, n * n_x))
    F = np.zeros((n * n_x, n * n_u))
    dH = np.zeros(n * n_x)
    for i, rm in enumerate(m.models):
        xi = x[i]
        sl = slice(i * n_x, (i + 1) * n_x)
        J[sl, sl] = rm.J(xi)
        R[sl, sl] = rm.R(xi)
        F[sl, i * n_u : (i + 1) * n_u] = rm.F(xi)
        dH[sl] = rm.dH(xi)
    return J, R, F, dH


def validate_structure(model, states, tol=1e-9):
    """Check J skew-symmetry and R positive-semidefiniteness at sampled states."""
    for x in np.atleast_2d(np.asarray(states, dtype=np.float64)):
        J = model.J(x)
        if np.abs(J + J.T).max() > tol:
            raise ContractError("interconnection matrix is not skew-symmetric")
        R = model.R(x)
        if np.abs(R - R.T).max() > tol:
            raise ContractError("dissipation matrix is not symmetric")
        if np.linalg.eigvalsh(0.5 * (R + R.T)).min() < -tol:
            raise ContractError("dissipation matrix is not positive semidefinite")


# ---------------------------------------------------------------------------
# model factories


def double_integrator(dim=2, damping=0.0):
    """Planar point mass: x = (p, v), ẋ = (v, u − damping·v), H = ½‖v‖²."""
    n_x = 2 * dim
    I = np.eye(dim)
    Z = np.zeros((dim, dim))
    J = np.block([[Z, I], [-I, Z]])
    R = np.block([[Z, Z], [Z, damping * I]])
    F = np.vstack([Z, I])

    def H(x):
        v = x[dim:]
        return 0.5 * float(v @ v)

    def dH(x):
        g = np.zeros(n_x)
        g[dim:] = x[dim:]
        return g

    G = np.diag(np.r_[np.zeros(dim), np.ones(dim)])
    return RobotPhModel(n_x, dim, J, R, F, H, dH, dH_lin=G)


def spring_mass(dim=2, stiffness=1.0, damping=0.0):
    """Harmonic oscillator: H = ½k‖p‖² + ½‖v‖²; nonzero Euler energy drift."""
    n_x = 2 * dim
    I = np.eye(dim)
    Z = np.zeros((dim, dim))
    J = np.block([[Z, I], [-I, Z]])
    R = np.block([[Z, Z], [Z, damping * I]])
    F = np.vstack([Z, I])
    k = float(stiffness)

    def H(x):
        p, v = x[:dim], x[dim:]
        return 0.5 * k * float(p @ p) + 0.5 * float(v @ v)

    def dH(x):
        g = np.empty(n_x)
        g[:dim] = k * x[:dim]
        g[dim:] = x[dim:]
        return g

    G = np.diag(np.r_[k * np.ones(dim), np.ones(dim)])
    return RobotPhModel(n_x, dim, J, R, F, H, dH, dH_lin=G)


def navigation_robot(dim=2, damping=0.25):
    """Goal-tracking robot: x = (p, v, g − p) with damped velocity dynamics.

    The error coordinate e = g − p evolves as ė = −v for a fixed goal, which
    the interconnection realizes with an extra skew coupling block.
    """
    n_x = 3 * dim
    I = np.eye(dim)
    Z = np.zeros((dim, dim))
    J = np.block([[Z, I, Z], [-I, Z, I], [Z, -I, Z]])
    R = np.zeros((n_x, n_x))
    R[dim : 2 * dim, dim : 2 * dim] = damping * I
    F = np.vstack([Z, I, Z])

    def H(x):
        v = x[dim : 2 * dim]
        return 0.5 * float(v @ v)

    def dH(x):
        g = np.zeros(n_x)
        g[dim : 2 * dim] = x[dim : 2 * dim]
        return g

    G = np.diag(np.r_[np.zeros(dim), np.ones(dim), np.zeros(dim)])
    return RobotPhModel(n_x, dim, J, R, F, H, dH, dH_lin=G)

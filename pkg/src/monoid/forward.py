"""Forward-in-time solvers for the reaction models.

Two state systems share one Crank-Nicolson + Newton stepper:

* the two-variable ODE ``dz/dt = f - Phi(z) - (0, delta*w)`` with the network
  (or the cubic FitzHugh-Nagumo right-hand side) as reaction term, and
* its diffusive extension on a uniform grid, where the first component also
  carries ``nu * Laplace(v)`` with zero-flux (Neumann) boundaries.

The ODE stepper is vectorized over a bundle of initial conditions so a whole
dataset advances in lockstep; converged entries are frozen so each trajectory
sees exactly the Newton updates it would see alone.  The spatial Laplacian is
cell-centered with reflected ghost cells, which keeps the discrete integral
of a purely diffusing field constant to solver precision.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .activations import ActivationSpec, act_deriv
from .errors import SolverError
from .network import WeightStack, forward_trace, nn_jacobian_z

FH_INITIAL_CONDITIONS = (
    (0.0, 0.0), (1.0, 1.0), (-1.0, -1.0), (1.0, 0.0),
    (0.0, 1.0), (-1.0, 1.0), (1.0, -1.0),
)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with nodes ``t_k = k * dt``."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0.0):
            raise ValueError("final time T must be positive and finite")
        if self.n_steps < 1:
            raise ValueError("need at least one time step")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 25


@dataclass(frozen=True)
class OdeModelConfig:
    """Linear recovery rate and constant forcings of the ODE system."""

    delta: float = 0.0
    f_v: float = 0.0
    f_w: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite(x) for x in (self.delta, self.f_v, self.f_w)):
            raise ValueError("model constants must be finite")
        if self.delta < 0.0:
            raise ValueError("delta must be nonnegative")


@dataclass(frozen=True)
class SpaceGrid:
    """Cell-centered uniform grid, 1D or 2D, spacing ``h`` on every axis."""

    shape: tuple
    h: float

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) not in (1, 2) or any(n < 1 for n in shape):
            raise ValueError("grid must be 1D or 2D with positive extents")
        if not (np.isfinite(self.h) and self.h > 0.0):
            raise ValueError("grid spacing must be positive")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.dim


@dataclass(frozen=True)
class PdeModelConfig:
    nu: float
    space: SpaceGrid
    delta: float = 0.0
    f_v: float = 0.0
    f_w: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu > 0.0):
            raise ValueError("diffusivity nu must be positive")
        if self.delta < 0.0 or not all(np.isfinite(x) for x in (self.delta, self.f_v, self.f_w)):
            raise ValueError("model constants must be finite, delta nonnegative")


@dataclass(frozen=True)
class FhParams:
    """Cubic/linear reaction coefficients of the FitzHugh-Nagumo system."""

    a: float = -1.0 / 3.0
    b: float = 0.0
    c: float = 1.0
    d: float = -1.0
    eta: float = 0.064
    gamma: float = 0.08

    def __post_init__(self):
        vals = (self.a, self.b, self.c, self.d, self.eta, self.gamma)
        if not all(np.isfinite(x) for x in vals):
            raise ValueError("FitzHugh-Nagumo parameters must be finite")


@dataclass(frozen=True)
class Trajectory:
    """Time-sampled state ``z_k = (v_k, w_k)`` plus Newton step metadata."""

    grid: TimeGrid
    states: np.ndarray
    newton_iters: np.ndarray = field(default=None, repr=False)
    newton_residuals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.shape != (self.grid.n_steps + 1, 2):
            raise ValueError("states must have shape (n_steps + 1, 2)")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory contains non-finite states")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def v(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def w(self) -> np.ndarray:
        return self.states[:, 1]


@dataclass(frozen=True)
class FieldTrajectory:
    """Gridded fields sampled on the shared time grid."""

    grid: TimeGrid
    space: SpaceGrid
    v_fields: np.ndarray
    w_fields: np.ndarray

    def __post_init__(self):
        want = (self.grid.n_steps + 1,) + self.space.shape
        for name in ("v_fields", "w_fields"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class DatasetEntry:
    z0: tuple
    trajectory: Trajectory

    def __post_init__(self):
        z0 = (float(self.z0[0]), float(self.z0[1]))
        object.__setattr__(self, "z0", z0)
        if not np.array_equal(self.trajectory.states[0], z0):
            raise ValueError("trajectory does not start at its declared z0")


@dataclass(frozen=True)
class Dataset:
    """K reference trajectories sharing one time grid."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ValueError("dataset needs at least one entry")
        g0 = entries[0].trajectory.grid
        for e in entries:
            g = e.trajectory.grid
            if (g.T, g.n_steps) != (g0.T, g0.n_steps):
                raise ValueError("dataset entries must share one time grid")

    @property
    def grid(self) -> TimeGrid:
        return self.entries[0].trajectory.grid

    def __len__(self):
        return len(self.entries)

    def initial_states(self) -> np.ndarray:
        return np.array([e.z0 for e in self.entries])

    def stacked_states(self) -> np.ndarray:
        """All trajectories as one array of shape (n_steps + 1, K, 2)."""
        return np.stack([e.trajectory.states for e in self.entries], axis=1)

    def resample(self, grid: TimeGrid) -> "Dataset":
        """Linear interpolation onto another grid (same final time)."""
        own = self.grid
        if (own.T, own.n_steps) == (grid.T, grid.n_steps):
            return self
        if grid.T > own.T:
            raise ValueError("cannot resample beyond the recorded final time")
        t_old, t_new = own.times(), grid.times()
        entries = []
        for e in self.entries:
            states = np.column_stack([
                np.interp(t_new, t_old, e.trajectory.states[:, i]) for i in (0, 1)
            ])
            entries.append(DatasetEntry(e.z0, Trajectory(grid, states)))
        return Dataset(tuple(entries))


def fh_rhs(z, params: FhParams, f):
    """Time derivative of the FitzHugh-Nagumo system at ``z``; batched."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("state must be finite")
    v, w = z[..., 0], z[..., 1]
    f_v, f_w = f
    dv = f_v - (params.a * v ** 3 + params.b * v ** 2 + params.c * v + params.d * w)
    dw = f_w - (params.eta * w + params.gamma * v)
    return np.stack([dv, dw], axis=-1)


class FhDynamics:
    """Cubic reference dynamics with its analytic 2x2 Jacobian."""

    def __init__(self, params: FhParams, f_v: float, f_w: float):
        self.params = params
        self.f = (float(f_v), float(f_w))

    def rhs(self, z):
        return fh_rhs(z, self.params, self.f)

    def rhs_jac(self, z):
        z = np.asarray(z, dtype=float)
        v = z[..., 0]
        p = self.params
        jac = np.empty(z.shape[:-1] + (2, 2))
        jac[..., 0, 0] = -(3.0 * p.a * v ** 2 + 2.0 * p.b * v + p.c)
        jac[..., 0, 1] = -p.d
        jac[..., 1, 0] = -p.gamma
        jac[..., 1, 1] = -p.eta
        return self.rhs(z), jac


class NetworkDynamics:
    """Network reaction dynamics ``dz/dt = f - Phi(z) - (0, delta*w)``."""

    def __init__(self, weights: WeightStack, act: ActivationSpec, model: OdeModelConfig):
        self.weights = weights
        self.act = act
        self.model = model
        self._f = np.array([model.f_v, model.f_w])

    def rhs(self, z):
        z = np.asarray(z, dtype=float)
        phi = forward_trace(z, self.weights, self.act)[-1]
        out = self._f - phi
        out[..., 1] -= self.model.delta * z[..., 1]
        return out

    def rhs_jac(self, z):
        z = np.asarray(z, dtype=float)
        trace = forward_trace(z, self.weights, self.act)
        out = self._f - trace[-1]
        out[..., 1] -= self.model.delta * z[..., 1]
        jac = -nn_jacobian_z(z, self.weights, self.act, trace=trace)
        jac[..., 1, 1] -= self.model.delta
        return out, jac


def _solve2x2(M, rhs):
    """Batched 2x2 solve by explicit inversion (elementwise arithmetic)."""
    a, b = M[..., 0, 0], M[..., 0, 1]
    c, d = M[..., 1, 0], M[..., 1, 1]
    det = a * d - b * c
    x0 = (rhs[..., 0] * d - rhs[..., 1] * b) / det
    x1 = (rhs[..., 1] * a - rhs[..., 0] * c) / det
    return np.stack([x0, x1], axis=-1)


class CnSolution:
    """Batched Crank-Nicolson result: states, converged Jacobians, metadata.

    ``states`` has shape (n_steps + 1, K, 2); ``jac_rhs`` holds the dynamics
    Jacobian evaluated at every accepted state, which the discrete adjoint
    reuses as the exact linearization of each step.
    """

    def __init__(self, grid, states, jac_rhs, newton_iters, newton_residuals):
        self.grid = grid
        self.states = states
        self.jac_rhs = jac_rhs
        self.newton_iters = newton_iters
        self.newton_residuals = newton_residuals

    @property
    def n_batch(self) -> int:
        return self.states.shape[1]

    def trajectory(self, k: int) -> Trajectory:
        return Trajectory(self.grid, self.states[:, k],
                          newton_iters=self.newton_iters,
                          newton_residuals=self.newton_residuals[:, k])


def solve_cn_batch(dynamics, z0, grid: TimeGrid, newton: NewtonConfig = NewtonConfig()) -> CnSolution:
    """Advance a bundle of initial states with Crank-Nicolson + Newton.

    Per step, solves ``y - z_k = (dt/2)(F(z_k) + F(y))`` to the residual
    max-norm tolerance, starting from ``z_k``.  Entries that have converged
    are frozen while the rest keep iterating.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    if z0.shape[-1] != 2 or z0.ndim != 2:
        raise ValueError("initial states must have shape (K, 2) or (2,)")
    if not np.all(np.isfinite(z0)):
        raise ValueError("initial states must be finite")
    n_batch = z0.shape[0]
    n = grid.n_steps
    dt = grid.dt

    states = np.empty((n + 1, n_batch, 2))
    jac_rhs = np.empty((n + 1, n_batch, 2, 2))
    iters = np.zeros(n, dtype=int)
    residuals = np.zeros((n, n_batch))

    eye = np.eye(2)
    states[0] = z0
    f_cur, jac_rhs[0] = dynamics.rhs_jac(z0)

    for k in range(n):
        zk = states[k]
        base = zk + 0.5 * dt * f_cur
        y = zk.copy()
        f_y, jac_y = f_cur, jac_rhs[k]
        res_vec = y - base - 0.5 * dt * f_y
        res = np.abs(res_vec).max(axis=-1)
        it = 0
        while True:
            done = res <= newton.tol
            if done.all():
                break
            if it >= newton.max_iter:
                raise SolverError(
                    f"Newton stalled at step {k}: residual {res.max():.3e} "
                    f"after {it} iterations", step=k, residual=float(res.max()))
            mat = eye - 0.5 * dt * jac_y
            delta = _solve2x2(mat, -res_vec)
            y = np.where(done[:, None], y, y + delta)
            f_new, jac_new = dynamics.rhs_jac(y)
            new_vec = y - base - 0.5 * dt * f_new
            keep = done[:, None]
            f_y = np.where(keep, f_y, f_new)
            jac_y = np.where(keep[..., None], jac_y, jac_new)
            res_vec = np.where(keep, res_vec, new_vec)
            res = np.where(done, res, np.abs(new_vec).max(axis=-1))
            it += 1
        if not np.all(np.isfinite(y)):
            raise SolverError(f"non-finite state at step {k}", step=k,
                              residual=float(res.max()))
        states[k + 1] = y
        jac_rhs[k + 1] = jac_y
        f_cur = f_y
        iters[k] = it
        residuals[k] = res

    return CnSolution(grid, states, jac_rhs, iters, residuals)


def simulate_cn(dynamics, z0, grid: TimeGrid, newton: NewtonConfig = NewtonConfig()) -> Trajectory:
    """Single-trajectory Crank-Nicolson solve; see :func:`solve_cn_batch`."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (2,):
        raise ValueError("z0 must be a 2-vector")
    return solve_cn_batch(dynamics, z0[None, :], grid, newton).trajectory(0)


def generate_dataset(params: FhParams, f, grid: TimeGrid,
                     newton: NewtonConfig = NewtonConfig(),
                     initial_conditions=FH_INITIAL_CONDITIONS,
                     threads: int = 1) -> Dataset:
    """Reference trajectories of the cubic model from the stock initial set."""
    dyn = FhDynamics(params, f[0], f[1])

    def run(z0):
        return DatasetEntry(tuple(z0), simulate_cn(dyn, np.asarray(z0, dtype=float), grid, newton))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(run, initial_conditions))
    else:
        entries = [run(z0) for z0 in initial_conditions]
    return Dataset(tuple(entries))


def neumann_laplacian(space: SpaceGrid) -> sp.csr_matrix:
    """Cell-centered Laplacian with zero-flux faces (reflected ghost cells).

    Symmetric with zero row sums, so plain cell sums are invariants of pure
    diffusion.
    """
    def line(n):
        if n == 1:
            return sp.csr_matrix((1, 1))
        main = np.full(n, -2.0)
        main[0] = main[-1] = -1.0
        off = np.ones(n - 1)
        return sp.diags([off, main, off], [-1, 0, 1], format="csr")

    h2 = space.h ** 2
    if space.dim == 1:
        return (line(space.shape[0]) / h2).tocsr()
    ny, nx = space.shape
    lap = sp.kron(sp.identity(ny), line(nx)) + sp.kron(line(ny), sp.identity(nx))
    return (lap / h2).tocsr()


def simulate_pde(weights: WeightStack, act: ActivationSpec, cfg: PdeModelConfig,
                 v0, w0, grid: TimeGrid,
                 newton: NewtonConfig = NewtonConfig()) -> FieldTrajectory:
    """Reaction-diffusion solve, Crank-Nicolson in diffusion and reaction.

    Each step solves the coupled nonlinear system with Newton; the step
    Jacobian couples the diffusion stencil with the pointwise 2x2 network
    Jacobians and is factorized sparsely (direct solve; grids are small).
    """
    space = cfg.space
    v0 = np.asarray(v0, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    if v0.shape != space.shape or w0.shape != space.shape:
        raise ValueError(f"initial fields must have shape {space.shape}")
    if not (np.all(np.isfinite(v0)) and np.all(np.isfinite(w0))):
        raise ValueError("initial fields must be finite")

    m = space.n_cells
    lap = neumann_laplacian(space)
    reaction = NetworkDynamics(weights, act,
                               OdeModelConfig(cfg.delta, cfg.f_v, cfg.f_w))
    dt = grid.dt
    n = grid.n_steps

    def rhs_jac(y):
        z = y.reshape(2, m).T
        react, jac = reaction.rhs_jac(z)
        out = react.T.copy()
        out[0] += cfg.nu * (lap @ y[:m])
        return out.reshape(-1), jac

    def step_matrix(jac):
        # I - dt/2 * (diffusion + pointwise reaction Jacobian)
        vv = sp.identity(m) - 0.5 * dt * (cfg.nu * lap + sp.diags(jac[:, 0, 0]))
        vw = sp.diags(-0.5 * dt * jac[:, 0, 1])
        wv = sp.diags(-0.5 * dt * jac[:, 1, 0])
        ww = sp.identity(m) - 0.5 * dt * sp.diags(jac[:, 1, 1])
        return sp.bmat([[vv, vw], [wv, ww]], format="csc")

    v_fields = np.empty((n + 1,) + space.shape)
    w_fields = np.empty((n + 1,) + space.shape)
    v_fields[0], w_fields[0] = v0, w0

    y = np.concatenate([v0.ravel(), w0.ravel()])
    f_cur, jac_cur = rhs_jac(y)
    for k in range(n):
        base = y + 0.5 * dt * f_cur
        cand = y.copy()
        f_c, jac_c = f_cur, jac_cur
        res_vec = cand - base - 0.5 * dt * f_c
        res = np.abs(res_vec).max()
        it = 0
        while res > newton.tol:
            if it >= newton.max_iter:
                raise SolverError(
                    f"PDE Newton stalled at step {k}: residual {res:.3e}",
                    step=k, residual=float(res))
            try:
                delta = spla.splu(step_matrix(jac_c)).solve(-res_vec)
            except RuntimeError as exc:
                raise SolverError(f"sparse factorization failed at step {k}: {exc}",
                                  step=k, residual=float(res)) from exc
            cand = cand + delta
            f_c, jac_c = rhs_jac(cand)
            res_vec = cand - base - 0.5 * dt * f_c
            res = np.abs(res_vec).max()
            it += 1
        if not np.all(np.isfinite(cand)):
            raise SolverError(f"non-finite field at step {k}", step=k, residual=float(res))
        y, f_cur, jac_cur = cand, f_c, jac_c
        v_fields[k + 1] = y[:m].reshape(space.shape)
        w_fields[k + 1] = y[m:].reshape(space.shape)

    return FieldTrajectory(grid, space, v_fields, w_fields)


def energy_functional(v, w, cell_volume: float = 1.0) -> float:
    """Half the squared L2 norm of the pair: ``(|v|^2 + |w|^2) / 2``.

    For gridded fields pass the cell volume so the sum approximates the
    integral; point states use the plain squares.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    return 0.5 * cell_volume * float(np.sum(v * v) + np.sum(w * w))

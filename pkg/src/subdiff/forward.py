"""Time stepping for rho d_t^alpha u + A u = sum_k lambda_k(t) delta_{x_k}.

Galerkin P1 in space, backward-Euler convolution quadrature in time. The
unknown stepped internally is V^n = U^n - U^0, so each step solves

    (tau^-alpha M + S) V^n = F^n - S U^0 - tau^-alpha M sum_{j=1}^n w_j V^{n-j}

with one factorization reused for every step. The history sum is evaluated
directly, O(n_steps^2) vector updates in total.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (
    CoefficientSet,
    Mesh,
    SubdomainMask,
    apply_dirichlet,
    assemble_mass,
    assemble_stiffness,
    interpolate,
    point_source_vector,
)
from .fractional import TimeGrid, check_order, cq_weights
from .linsolve import factorize

__all__ = [
    "ForwardOperator",
    "ForwardSolution",
    "ObservationSpec",
    "SourceSet",
    "observation_spec",
    "observe",
    "restrict_to_coarse",
    "run_sources",
    "solve_forward",
    "steady_point_source_1d",
]

log = logging.getLogger(__name__)


class SolverDivergence(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at time step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class SourceSet:
    locations: np.ndarray  # (N, dim)
    intensities: np.ndarray  # (N, n_steps + 1), samples at the grid nodes

    def __post_init__(self) -> None:
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        lam = np.atleast_2d(np.asarray(self.intensities, dtype=float))
        if loc.shape[0] != lam.shape[0]:
            raise ValueError(f"{loc.shape[0]} locations but {lam.shape[0]} intensity series")
        for i in range(len(loc)):
            for j in range(i):
                if np.allclose(loc[i], loc[j], rtol=0.0, atol=1e-14):
                    raise ValueError(f"source locations {i} and {j} coincide")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "intensities", lam)

    @property
    def N(self) -> int:
        return self.locations.shape[0]

    @classmethod
    def from_functions(cls, locations, funcs, grid: TimeGrid) -> "SourceSet":
        t = grid.nodes
        lam = [np.broadcast_to(np.asarray(f(t), dtype=float), t.shape) for f in funcs]
        return cls(np.atleast_2d(np.asarray(locations, dtype=float)), np.array(lam))

    @classmethod
    def empty(cls, dim: int, grid: TimeGrid) -> "SourceSet":
        return cls(np.zeros((0, dim)), np.zeros((0, grid.n_steps + 1)))


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    mesh: Mesh
    grid: TimeGrid
    states: np.ndarray  # (n_steps + 1, n_nodes)

    def to_csv(self, path) -> None:
        """Rows are time nodes; first column is t, then one column per mesh node."""
        header = "t," + ",".join(f"u{i}" for i in range(self.mesh.n_nodes))
        data = np.column_stack([self.grid.nodes, self.states])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


@dataclass(frozen=True, eq=False)
class ObservationSpec:
    mask: SubdomainMask
    window: tuple  # (first, last) step indices, inclusive
    epsilon: float

    def __post_init__(self) -> None:
        first, last = self.window
        if last - first + 1 < 2:
            raise ValueError("observation window must contain at least 2 time steps")
        if len(self.mask) == 0:
            raise ValueError("observation mask is empty")

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.window[0], self.window[1] + 1)

    @property
    def size(self) -> int:
        return len(self.steps) * len(self.mask)


def observation_spec(mask: SubdomainMask, grid: TimeGrid, epsilon: float) -> ObservationSpec:
    """Observe all grid times in (T - epsilon, T]."""
    if not (0 < epsilon < grid.T) and not np.isclose(epsilon, grid.T):
        raise ValueError(f"epsilon must lie in (0, T], got {epsilon}")
    start = (grid.T - epsilon) / grid.tau
    first = int(np.floor(start + 1e-9)) + 1
    return ObservationSpec(mask=mask, window=(first, grid.n_steps), epsilon=float(epsilon))


class ForwardOperator:
    """Assembled and factorized time stepper for one mesh, coefficient set and grid.

    Linear in (U^0, F): :meth:`run` accepts several right-hand sides at once
    by giving ``u0`` a trailing column axis.
    """

    def __init__(self, mesh: Mesh, coeffs: CoefficientSet, alpha: float, grid: TimeGrid,
                 method: str = "direct"):
        self.mesh = mesh
        self.coeffs = coeffs
        self.alpha = check_order(alpha)
        self.grid = grid
        self.weights = cq_weights(self.alpha, grid.n_steps, grid.tau)
        self.mass = assemble_mass(mesh, coeffs.rho)
        self.stiffness = assemble_stiffness(mesh, coeffs)
        self.scale = grid.tau ** (-self.alpha)
        system = self.scale * self.weights.w[0] * self.mass + self.stiffness
        system, _ = apply_dirichlet(system, np.zeros(mesh.n_nodes), mesh.boundary_nodes)
        self.system = system
        self.factor = factorize(system, symmetric=not coeffs.has_drift, method=method)
        self._boundary = mesh.boundary_nodes

    def load_matrix(self, locations) -> np.ndarray:
        """Columns are the point-source load vectors, shape (n_nodes, N)."""
        locations = np.atleast_2d(locations)
        if locations.shape[0] == 0:
            return np.zeros((self.mesh.n_nodes, 0))
        return np.column_stack([point_source_vector(self.mesh, x) for x in locations])

    def run(self, u0, loads=None, intensities=None) -> np.ndarray:
        """March all steps; returns states of shape (n_steps + 1,) + u0.shape.

        ``loads`` is (n_nodes, K); ``intensities`` is (n_steps + 1, K) or
        (n_steps + 1, K, r) and gives F^n = loads @ intensities[n].
        """
        n_steps = self.grid.n_steps
        U0 = np.array(u0, dtype=float)
        U0[self._boundary] = 0.0
        shape = U0.shape
        V = np.zeros((n_steps + 1,) + shape)
        Vflat = V.reshape(n_steps + 1, -1)
        w = self.weights.w
        base = -(self.stiffness @ U0)

        have_load = loads is not None and np.shape(loads)[1] > 0
        if have_load:
            loads = sp.csr_matrix(loads)
            lam = np.asarray(intensities, dtype=float)
            if lam.shape[0] != n_steps + 1:
                raise ValueError(f"intensities need {n_steps + 1} samples, got {lam.shape[0]}")

        for n in range(1, n_steps + 1):
            hist = (w[n:0:-1] @ Vflat[:n]).reshape(shape)
            rhs = base - self.scale * (self.mass @ hist)
            if have_load:
                rhs = rhs + loads @ lam[n]
            rhs[self._boundary] = 0.0
            V[n] = self.factor.solve(rhs)
            if not np.isfinite(V[n]).all():
                raise SolverDivergence(n)
        V += U0
        return V


def solve_forward(mesh: Mesh, coeffs: CoefficientSet, alpha: float, grid: TimeGrid,
                  u0, sources: SourceSet, method: str = "direct") -> ForwardSolution:
    """Solve the initial-boundary value problem with homogeneous Dirichlet data.

    ``u0`` is a nodal vector or a field accepted by :func:`fem.interpolate`.
    """
    op = ForwardOperator(mesh, coeffs, alpha, grid, method=method)
    return run_sources(op, u0, sources)


def run_sources(op: ForwardOperator, u0, sources: SourceSet) -> ForwardSolution:
    mesh, grid = op.mesh, op.grid
    if np.ndim(u0) == 1 and np.shape(u0)[0] == mesh.n_nodes:
        U0 = np.asarray(u0, dtype=float)
    else:
        U0 = interpolate(mesh, u0)
    if sources.N and sources.intensities.shape[1] != grid.n_steps + 1:
        raise ValueError("intensity samples do not match the time grid")
    states = op.run(U0, op.load_matrix(sources.locations), sources.intensities.T)
    return ForwardSolution(mesh=mesh, grid=grid, states=states)


def observe(sol: ForwardSolution, spec: ObservationSpec) -> np.ndarray:
    """Flatten U^m_i for m in the window and i in the mask, time-major."""
    return observe_states(sol.states, spec)


def observe_states(states: np.ndarray, spec: ObservationSpec) -> np.ndarray:
    """Same as :func:`observe` for a raw state array; extra trailing axes become columns."""
    first, last = spec.window
    if first < 0 or last >= states.shape[0]:
        raise ValueError("observation window exceeds the solution's time grid")
    block = states[first:last + 1, spec.mask.node_indices]
    return block.reshape((block.shape[0] * block.shape[1],) + block.shape[2:])


def steady_point_source_1d(x0: float, lambda0: float, length: float = 1.0):
    """Stationary solution of -u'' = lambda0 delta_{x0} on (0, length), u = 0 at both ends."""
    if not (0.0 < x0 < length):
        raise ValueError(f"x0 must lie strictly inside (0, {length}), got {x0}")

    def ubar(x):
        x = np.asarray(x, dtype=float)
        if x.ndim and x.shape[-1] == 1:
            x = x[..., 0]
        left = lambda0 * (length - x0) * x / length
        right = lambda0 * x0 * (length - x) / length
        return np.where(x < x0, left, right)

    return ubar


def interpolation_matrix(source: Mesh, target_points: np.ndarray) -> sp.csr_matrix:
    """Sparse P1 interpolation from ``source`` nodal values to points."""
    rows, cols, vals = [], [], []
    for r, x in enumerate(target_points):
        idx, bary = source.locate(x)
        rows.extend([r] * len(idx))
        cols.extend(idx.tolist())
        vals.extend(bary.tolist())
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(target_points), source.n_nodes))


def restrict_to_coarse(fine: ForwardSolution, coarse_mesh: Mesh, coarse_grid: TimeGrid) -> ForwardSolution:
    """Sample a fine solution on coarser nested time levels and mesh nodes."""
    if not np.isclose(fine.grid.T, coarse_grid.T):
        raise ValueError("time horizons differ")
    ratio = fine.grid.n_steps / coarse_grid.n_steps
    if ratio < 1 or abs(ratio - round(ratio)) > 1e-12:
        raise ValueError(
            f"coarse time grid ({coarse_grid.n_steps} steps) is not nested in the fine one "
            f"({fine.grid.n_steps} steps)"
        )
    ratio = int(round(ratio))
    P = interpolation_matrix(fine.mesh, coarse_mesh.nodes)
    states = (P @ fine.states[::ratio].T).T
    return ForwardSolution(mesh=coarse_mesh, grid=coarse_grid, states=np.ascontiguousarray(states))

"""Levenberg-Marquardt recovery of point sources (and optionally u0).

Each iteration linearizes the observation map around the current iterate
and minimizes

    |F(p_k) - z + J_x dx + J_lam dlam + J_u0 du0|^2
        + beta_x |dx|^2 + beta_lam |dlam|_{H1(0,T)}^2 + beta_u0 |du0|_{H1}^2

with penalty weights that shrink geometrically between iterations.

The map is linear in the intensities and in u0, so J_lam and J_u0 come
from exact sensitivity solves; only the location derivative is a finite
difference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la

from .fem import Mesh, assemble_mass, assemble_stiffness, CoefficientSet
from .forward import ForwardOperator, ObservationSpec, observe_states
from .fractional import TimeGrid

__all__ = [
    "InversionSetup",
    "IterateHistory",
    "IterationRecord",
    "LMConfig",
    "NormalEquationError",
    "ParamVector",
    "forward_map",
    "h1_gram",
    "h1_space_gram",
    "intensity_error",
    "jacobian_lambda",
    "jacobian_u0",
    "jacobian_x",
    "lm_step",
    "run_lm",
    "solve_normal_equations",
]

log = logging.getLogger(__name__)


class NormalEquationError(np.linalg.LinAlgError):
    """The regularized normal matrix is not positive definite."""


@dataclass(frozen=True, eq=False)
class ParamVector:
    locations: np.ndarray  # (N, dim)
    intensities: np.ndarray  # (N, n_steps + 1)
    u0: np.ndarray | None = None  # interior nodal values, or None when u0 is known

    def __post_init__(self) -> None:
        object.__setattr__(self, "locations", np.atleast_2d(np.asarray(self.locations, dtype=float)))
        object.__setattr__(self, "intensities", np.atleast_2d(np.asarray(self.intensities, dtype=float)))
        if self.u0 is not None:
            object.__setattr__(self, "u0", np.asarray(self.u0, dtype=float))

    @property
    def N(self) -> int:
        return self.locations.shape[0]

    def pack(self) -> np.ndarray:
        parts = [self.locations.ravel(), self.intensities.ravel()]
        if self.u0 is not None:
            parts.append(self.u0)
        return np.concatenate(parts)

    def unpack(self, vec) -> "ParamVector":
        """Inverse of :meth:`pack`, shaped like ``self``."""
        vec = np.asarray(vec, dtype=float)
        nl, ni = self.locations.size, self.intensities.size
        nu = 0 if self.u0 is None else self.u0.size
        if vec.size != nl + ni + nu:
            raise ValueError(f"expected {nl + ni + nu} entries, got {vec.size}")
        loc = vec[:nl].reshape(self.locations.shape)
        lam = vec[nl:nl + ni].reshape(self.intensities.shape)
        u0 = vec[nl + ni:].copy() if self.u0 is not None else None
        return ParamVector(loc.copy(), lam.copy(), u0)


@dataclass
class LMConfig:
    beta_x0: float
    beta_lambda0: float
    beta_u0: float | None = None
    gamma_x: float = 0.7
    gamma_lambda: float = 0.8
    K_max: int = 20
    fd_step: float = 1e-4
    noise_delta: float = 0.0
    step_tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.beta_u0 is None:
            self.beta_u0 = self.beta_lambda0
        for name in ("beta_x0", "beta_lambda0", "beta_u0", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gamma_x", "gamma_lambda"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.K_max < 1:
            raise ValueError("K_max must be at least 1")
        if self.noise_delta < 0:
            raise ValueError("noise_delta must be non-negative")

    @classmethod
    def scaled_to(cls, data, **overrides) -> "LMConfig":
        """Defaults with penalties proportional to the squared data norm."""
        norm2 = float(np.dot(data, data)) or 1.0
        kw = dict(beta_x0=1e-2 * norm2, beta_lambda0=1e-2 * norm2)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass(eq=False)
class InversionSetup:
    """Coarse-grid forward model, observation geometry and (optional) truth."""

    op: ForwardOperator
    obs: ObservationSpec
    u0_nodal: np.ndarray  # used when u0 is not an unknown
    guard: float = None
    truth: ParamVector | None = None
    _ju0: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.guard is None:
            self.guard = self.mesh.h_max if self.mesh.dim == 1 else max(self.mesh.spacing)

    @property
    def mesh(self) -> Mesh:
        return self.op.mesh

    @property
    def grid(self) -> TimeGrid:
        return self.op.grid

    @property
    def interior(self) -> np.ndarray:
        return self.mesh.interior_nodes

    def full_u0(self, params: ParamVector) -> np.ndarray:
        if params.u0 is None:
            return self.u0_nodal
        u = np.zeros(self.mesh.n_nodes)
        u[self.interior] = params.u0
        return u

    def check_locations(self, locations, margin: float = 0.0) -> None:
        lo = self.guard - margin
        hi = np.asarray(self.mesh.lengths) - self.guard + margin
        loc = np.atleast_2d(locations)
        if np.any(loc < lo - 1e-12) or np.any(loc > hi + 1e-12):
            raise ValueError(f"source locations {loc.tolist()} leave the guard region")

    def clamp(self, locations, fd_step: float = 0.0) -> np.ndarray:
        lo = self.guard + fd_step
        hi = np.asarray(self.mesh.lengths) - self.guard - fd_step
        return np.clip(locations, lo, hi)


def forward_map(params: ParamVector, setup: InversionSetup) -> np.ndarray:
    """Observation of the coarse-grid solution with the candidate sources."""
    setup.check_locations(params.locations)
    op = setup.op
    states = op.run(setup.full_u0(params), op.load_matrix(params.locations), params.intensities.T)
    return observe_states(states, setup.obs)


def _hat_responses(op: ForwardOperator, loads: np.ndarray) -> np.ndarray:
    """Discrete response to a unit intensity at t_1 only, one column per load."""
    n_steps = op.grid.n_steps
    K = loads.shape[1]
    lam = np.zeros((n_steps + 1, K, K))
    lam[1] = np.eye(K)
    return op.run(np.zeros((op.mesh.n_nodes, K)), loads, lam)


def jacobian_lambda(setup: InversionSetup, locations) -> np.ndarray:
    """Sensitivity to nodal intensity values, columns ordered (source, time node).

    The scheme is a causal convolution with zero initial state, so the
    response to the hat at t_m is the response to the hat at t_1 delayed by
    m - 1 steps. The hat at t_0 is never sampled by the scheme and gives a
    zero column.
    """
    op = setup.op
    loads = op.load_matrix(locations)
    R = _hat_responses(op, loads)  # (n_steps + 1, n_nodes, N)
    steps = setup.obs.steps
    mask = setup.obs.mask.node_indices
    n_t = op.grid.n_steps + 1
    N = loads.shape[1]
    J = np.zeros((len(steps), len(mask), N, n_t))
    for m in range(1, n_t):
        lag = steps - m + 1
        ok = lag >= 1
        if not ok.any():
            continue
        J[ok, :, :, m] = R[lag[ok]][:, mask, :]
    return J.reshape(len(steps) * len(mask), N * n_t)


def jacobian_x(setup: InversionSetup, params: ParamVector, fd_step: float) -> np.ndarray:
    """Central differences in each location coordinate, columns ordered (source, axis).

    F depends on x_k only through the load vector of source k, so
    F(x + f e) - F(x - f e) equals the observed response to the load
    difference with intensity lambda_k; that response is solved directly.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    op = setup.op
    N, d = params.locations.shape
    cols = []
    for k in range(N):
        for c in range(d):
            e = np.zeros(d)
            e[c] = fd_step
            plus, minus = params.locations[k] + e, params.locations[k] - e
            setup.check_locations(np.vstack([plus, minus]))
            diff = op.load_matrix(plus[None]) - op.load_matrix(minus[None])
            cols.append(diff[:, 0] / (2.0 * fd_step))
    loads = np.column_stack(cols)
    r = N * d
    lam = np.zeros((op.grid.n_steps + 1, r, r))
    for k in range(N):
        for c in range(d):
            lam[:, k * d + c, k * d + c] = params.intensities[k]
    states = op.run(np.zeros((op.mesh.n_nodes, r)), loads, lam)
    return observe_states(states, setup.obs)


def jacobian_u0(setup: InversionSetup) -> np.ndarray:
    """Sensitivity to interior nodal values of u0 (independent of the iterate)."""
    if setup._ju0 is None:
        op = setup.op
        interior = setup.interior
        E = np.zeros((op.mesh.n_nodes, len(interior)))
        E[interior, np.arange(len(interior))] = 1.0
        setup._ju0 = observe_states(op.run(E), setup.obs)
    return setup._ju0


def h1_gram(grid: TimeGrid) -> np.ndarray:
    """Gram matrix of the H1(0, T) inner product for P1 functions on ``grid``."""
    n, tau = grid.n_steps, grid.tau
    G = np.zeros((n + 1, n + 1))
    local = tau / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]]) + np.array([[1.0, -1.0], [-1.0, 1.0]]) / tau
    for i in range(n):
        G[i:i + 2, i:i + 2] += local
    return G


def h1_space_gram(mesh: Mesh) -> np.ndarray:
    """H1(Omega) Gram matrix restricted to interior nodes."""
    G = assemble_mass(mesh) + assemble_stiffness(mesh, CoefficientSet())
    idx = mesh.interior_nodes
    return G[idx][:, idx].toarray()


def solve_normal_equations(J: np.ndarray, residual: np.ndarray, penalty: np.ndarray) -> np.ndarray:
    """Minimize ``|J d - residual|^2 + d' penalty d``."""
    A = J.T @ J + penalty
    try:
        c = la.cho_factor(A)
    except la.LinAlgError as exc:
        raise NormalEquationError(
            "regularized normal matrix is not positive definite; increase the penalty weights"
        ) from exc
    return la.cho_solve(c, J.T @ residual)


def _penalty(setup: InversionSetup, params: ParamVector, beta_x, beta_lambda, beta_u0) -> np.ndarray:
    blocks = [beta_x * np.eye(params.locations.size)]
    G = h1_gram(setup.grid)
    blocks += [beta_lambda * G] * params.N
    if params.u0 is not None:
        blocks.append(beta_u0 * h1_space_gram(setup.mesh))
    return la.block_diag(*blocks)


def full_jacobian(setup: InversionSetup, params: ParamVector, fd_step: float,
                  j_lambda: np.ndarray | None = None) -> np.ndarray:
    if j_lambda is None:
        j_lambda = jacobian_lambda(setup, params.locations)
    parts = [jacobian_x(setup, params, fd_step), j_lambda]
    if params.u0 is not None:
        parts.append(jacobian_u0(setup))
    return np.hstack(parts)


def lm_step(params: ParamVector, data, setup: InversionSetup, beta_x: float, beta_lambda: float,
            beta_u0: float | None = None, fd_step: float = 1e-4, j_lambda=None,
            residual=None) -> ParamVector:
    """One regularized Gauss-Newton update; locations are clamped to the guard region."""
    if residual is None:
        residual = np.asarray(data) - forward_map(params, setup)
    J = full_jacobian(setup, params, fd_step, j_lambda)
    B = _penalty(setup, params, beta_x, beta_lambda, beta_lambda if beta_u0 is None else beta_u0)
    delta = solve_normal_equations(J, residual, B)
    new = params.unpack(params.pack() + delta)
    return replace(new, locations=setup.clamp(new.locations, fd_step))


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    residual: float
    location_error: float
    intensity_error: float
    u0_error: float
    beta_x: float
    beta_lambda: float
    step_norm: float
    params: ParamVector = field(repr=False, compare=False)


@dataclass
class IterateHistory:
    records: list = field(default_factory=list)
    initial_residual: float = math.nan
    stop_reason: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    CSV_FIELDS = ("iteration", "residual", "location_error", "intensity_error", "u0_error",
                  "beta_x", "beta_lambda", "step_norm")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.CSV_FIELDS) + "\n")
            for r in self.records:
                fh.write(",".join(repr(float(getattr(r, f))) if f != "iteration" else str(r.iteration)
                                  for f in self.CSV_FIELDS) + "\n")


def intensity_error(lam, truth, grid: TimeGrid, window: tuple | None = None) -> float:
    """Relative L2(window) error of all intensity series together (trapezoid on nodes)."""
    lam, truth = np.atleast_2d(lam), np.atleast_2d(truth)
    t = grid.nodes
    sel = np.ones_like(t, dtype=bool)
    if window is not None:
        sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    num = np.trapezoid((lam - truth)[:, sel] ** 2, t[sel], axis=1).sum()
    den = np.trapezoid(truth[:, sel] ** 2, t[sel], axis=1).sum()
    return float(np.sqrt(num / den))


def location_error(locations, truth) -> float:
    """Largest Euclidean distance between corresponding sources."""
    return float(np.max(np.linalg.norm(np.atleast_2d(locations) - np.atleast_2d(truth), axis=1)))


def _errors(setup: InversionSetup, params: ParamVector):
    t = setup.truth
    if t is None:
        return math.nan, math.nan, math.nan
    ex = location_error(params.locations, t.locations)
    el = intensity_error(params.intensities, t.intensities, setup.grid)
    eu = math.nan
    if params.u0 is not None and t.u0 is not None:
        eu = float(np.linalg.norm(params.u0 - t.u0) / np.linalg.norm(t.u0))
    return ex, el, eu


def run_lm(initial: ParamVector, data, setup: InversionSetup, config: LMConfig):
    """Iterate :func:`lm_step` with geometrically decaying penalties.

    Stops at ``K_max``, when the residual reaches the discrepancy level
    ``sqrt(n_samples) * noise_delta * max|data|``, or when the update's max
    norm drops below ``step_tol``. Returns (final params, history).
    """
    data = np.asarray(data, dtype=float)
    level = math.sqrt(data.size) * config.noise_delta * float(np.max(np.abs(data)))
    history = IterateHistory()
    params = initial
    setup.check_locations(params.locations)
    residual = data - forward_map(params, setup)
    res_norm = float(np.linalg.norm(residual))
    history.initial_residual = res_norm
    if not math.isfinite(res_norm):
        history.stop_reason = "non-finite residual at iteration 0"
        return params, history
    beta_x, beta_lambda = config.beta_x0, config.beta_lambda0
    beta_u0 = config.beta_u0
    j_lambda, j_loc = None, None

    for k in range(1, config.K_max + 1):
        if level > 0 and res_norm <= level:
            history.stop_reason = "discrepancy"
            return params, history
        if j_lambda is None or np.max(np.abs(params.locations - j_loc)) > config.fd_step:
            j_lambda = jacobian_lambda(setup, params.locations)
            j_loc = params.locations.copy()
        new = lm_step(params, data, setup, beta_x, beta_lambda, beta_u0, fd_step=config.fd_step,
                      j_lambda=j_lambda, residual=residual)
        step = float(np.max(np.abs(new.pack() - params.pack())))
        if not math.isfinite(step):
            history.stop_reason = f"non-finite residual at iteration {k}"
            return params, history
        residual = data - forward_map(new, setup)
        res_norm = float(np.linalg.norm(residual))
        if not math.isfinite(res_norm):
            history.stop_reason = f"non-finite residual at iteration {k}"
            return params, history
        params = new
        ex, el, eu = _errors(setup, params)
        history.records.append(IterationRecord(k, res_norm, ex, el, eu, beta_x, beta_lambda, step, params))
        log.debug("iter %d residual %.4e step %.3e x_err %.3e", k, res_norm, step, ex)
        if step < config.step_tol:
            history.stop_reason = "small_step"
            return params, history
        beta_x *= config.gamma_x
        beta_lambda *= config.gamma_lambda
        beta_u0 *= config.gamma_lambda

    history.stop_reason = "max_iterations"
    return params, history

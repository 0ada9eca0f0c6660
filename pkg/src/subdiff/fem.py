"""P1 finite elements on structured 1D and 2D meshes.

Meshes here are always uniform: an interval split into equal cells, or the
unit square split into ``nx * ny`` squares, each cut into two triangles
along the lower-left to upper-right diagonal. Point location exploits that
structure, so no search tree is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

__all__ = [
    "CoefficientSet",
    "Mesh",
    "SubdomainMask",
    "apply_dirichlet",
    "assemble_mass",
    "assemble_stiffness",
    "build_interval_mesh",
    "build_rect_mesh",
    "evaluate_at_point",
    "interpolate",
    "point_source_vector",
    "subdomain_mask",
]

Field = Union[float, Callable[[np.ndarray], np.ndarray]]

_EPS = 1e-12


def _snap(s: float) -> float:
    """Clip a local coordinate to [0, 1], rounding values within 1e-12 of an end."""
    s = min(max(s, 0.0), 1.0)
    if s < _EPS:
        return 0.0
    if s > 1.0 - _EPS:
        return 1.0
    return s


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    nodes: np.ndarray  # (n_nodes, dim)
    elements: np.ndarray  # (n_elements, dim + 1)
    boundary_nodes: np.ndarray
    cells: tuple  # cells per direction
    lengths: tuple  # domain extent per direction

    def __post_init__(self) -> None:
        for arr in (self.nodes, self.elements, self.boundary_nodes):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def spacing(self) -> tuple:
        return tuple(L / n for L, n in zip(self.lengths, self.cells))

    @property
    def h_max(self) -> float:
        """Longest element edge."""
        sp_ = self.spacing
        if self.dim == 1:
            return sp_[0]
        return math.hypot(*sp_)

    @property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    def on_boundary(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.any(np.isclose(x, 0.0, atol=_EPS) | np.isclose(x, self.lengths, atol=_EPS)))

    def contains(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return x.shape == (self.dim,) and bool(
            np.all(x >= -_EPS) and np.all(x <= np.asarray(self.lengths) + _EPS)
        )

    def locate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Return (vertex indices, barycentric weights) of the element holding ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not self.contains(x):
            raise ValueError(f"point {x.tolist()} lies outside the mesh")
        if self.dim == 1:
            (n,), (h,) = self.cells, self.spacing
            i = min(int(x[0] // h), n - 1)
            s = _snap(x[0] / h - i)
            return np.array([i, i + 1]), np.array([1.0 - s, s])
        nx, ny = self.cells
        hx, hy = self.spacing
        i = min(int(x[0] // hx), nx - 1)
        j = min(int(x[1] // hy), ny - 1)
        sx = _snap(x[0] / hx - i)
        sy = _snap(x[1] / hy - j)
        n00 = j * (nx + 1) + i
        n10, n01, n11 = n00 + 1, n00 + nx + 1, n00 + nx + 2
        if sx >= sy:
            # lower-right triangle (n00, n10, n11)
            return np.array([n00, n10, n11]), np.array([1.0 - sx, sx - sy, sy])
        return np.array([n00, n11, n01]), np.array([1.0 - sy, sx, sy - sx])


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficients of rho d_t^alpha u - div(a grad u) + b . grad u + q u.

    Each entry is a constant or a callable of points ``x`` with shape
    ``(..., dim)``. ``a`` may return a scalar (isotropic) or a ``(dim, dim)``
    matrix per point; ``b`` returns a ``dim`` vector per point.
    """

    rho: Field = 1.0
    a: Field = 1.0
    b: Field = 0.0
    q: Field = 0.0

    @property
    def has_drift(self) -> bool:
        return callable(self.b) or np.any(np.asarray(self.b) != 0)


@dataclass(frozen=True)
class SubdomainMask:
    node_indices: np.ndarray
    description: str = ""
    coords: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.node_indices)


def build_interval_mesh(length: float, n_cells: int) -> Mesh:
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    if n_cells < 2:
        raise ValueError(f"need at least 2 cells, got {n_cells}")
    nodes = (np.arange(n_cells + 1) * (length / n_cells)).reshape(-1, 1)
    nodes[-1, 0] = length
    elements = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    return Mesh(
        dim=1,
        nodes=nodes,
        elements=elements,
        boundary_nodes=np.array([0, n_cells]),
        cells=(n_cells,),
        lengths=(float(length),),
    )


def build_rect_mesh(nx: int, ny: int) -> Mesh:
    """Structured triangulation of the unit square with ``2 nx ny`` triangles."""
    if nx < 1 or ny < 1:
        raise ValueError(f"need at least one cell per direction, got {(nx, ny)}")
    xs = np.arange(nx + 1) / nx
    ys = np.arange(ny + 1) / ny
    X, Y = np.meshgrid(xs, ys)  # node (i, j) -> j * (nx + 1) + i
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    n00 = (j * (nx + 1) + i).ravel()
    n10, n01, n11 = n00 + 1, n00 + nx + 1, n00 + nx + 2
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    elements = np.empty((2 * nx * ny, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper
    jj, ii = np.divmod(np.arange(nodes.shape[0]), nx + 1)
    boundary = np.flatnonzero((ii == 0) | (ii == nx) | (jj == 0) | (jj == ny))
    return Mesh(
        dim=2,
        nodes=nodes,
        elements=elements,
        boundary_nodes=boundary,
        cells=(nx, ny),
        lengths=(1.0, 1.0),
    )


def _quadrature(mesh: Mesh):
    """Reference-element rule: (barycentric points (q, dim+1), weights summing to 1)."""
    if mesh.dim == 1:
        g = math.sqrt(3.0 / 5.0)
        s = np.array([0.5 * (1 - g), 0.5, 0.5 * (1 + g)])
        return np.column_stack([1 - s, s]), np.array([5.0, 8.0, 5.0]) / 18.0
    # edge midpoints; exact for quadratics
    lam = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return lam, np.full(3, 1.0 / 3.0)


def _geometry(mesh: Mesh):
    """Element measures (E,) and constant basis gradients (E, dim+1, dim)."""
    verts = mesh.nodes[mesh.elements]  # (E, d+1, d)
    if mesh.dim == 1:
        h = verts[:, 1, 0] - verts[:, 0, 0]
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
        return h, grads
    e1 = verts[:, 1] - verts[:, 0]
    e2 = verts[:, 2] - verts[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det <= 0):
        raise ValueError("mesh has non-positively oriented triangles")
    # rows of inverse Jacobian transpose give gradients of barycentric coords 1, 2
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return 0.5 * det, grads


def _eval_field(f: Field, pts: np.ndarray) -> np.ndarray:
    if callable(f):
        return np.asarray(f(pts), dtype=float)
    return np.broadcast_to(np.asarray(f, dtype=float), pts.shape[:-1] + np.shape(f))


def _assemble(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    k = mesh.dim + 1
    rows = np.repeat(mesh.elements, k, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, k)).ravel()
    n = mesh.n_nodes
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_mass(mesh: Mesh, weight: Field = 1.0) -> sp.csr_matrix:
    """Weighted P1 mass matrix ``M_ij = int weight phi_i phi_j``."""
    lam, qw = _quadrature(mesh)
    measure, _ = _geometry(mesh)
    pts = np.einsum("qa,ead->eqd", lam, mesh.nodes[mesh.elements])
    wv = _eval_field(weight, pts)
    if np.any(wv <= 0):
        raise ValueError("mass weight must be positive at every quadrature point")
    local = np.einsum("q,eq,qa,qb->eab", qw, wv, lam, lam) * measure[:, None, None]
    return _assemble(mesh, local)


def assemble_stiffness(mesh: Mesh, coeffs: CoefficientSet) -> sp.csr_matrix:
    """P1 matrix of ``int (a grad phi_j).grad phi_i + (b.grad phi_j) phi_i + q phi_j phi_i``."""
    d = mesh.dim
    lam, qw = _quadrature(mesh)
    measure, grads = _geometry(mesh)
    pts = np.einsum("qa,ead->eqd", lam, mesh.nodes[mesh.elements])

    a = _eval_field(coeffs.a, pts)
    if a.shape == pts.shape[:-1]:
        a = a[..., None, None] * np.eye(d)
    if a.shape != pts.shape[:-1] + (d, d):
        raise ValueError(f"diffusion coefficient has shape {a.shape}, expected scalar or {d}x{d}")
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    if np.min(np.linalg.eigvalsh(sym)) <= 0:
        raise ValueError("diffusion coefficient violates ellipticity at a quadrature point")
    a_bar = np.einsum("q,eqij->eij", qw, a)
    local = np.einsum("eai,eij,ebj->eab", grads, a_bar, grads)

    if coeffs.has_drift:
        b = _eval_field(coeffs.b, pts)
        if b.shape == pts.shape[:-1]:
            b = np.broadcast_to(b[..., None], pts.shape)
        # (b . grad phi_j) phi_i, row index a <-> phi_i
        local = local + np.einsum("q,eqi,ebi,qa->eab", qw, b, grads, lam)

    q = _eval_field(coeffs.q, pts)
    if np.any(q < 0):
        raise ValueError("potential q must be non-negative")
    if np.any(q != 0):
        local = local + np.einsum("q,eq,qa,qb->eab", qw, q, lam, lam)

    return _assemble(mesh, local * measure[:, None, None])


def point_source_vector(mesh: Mesh, x) -> np.ndarray:
    """Load vector of a unit Dirac mass at ``x``: entries ``phi_i(x)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not mesh.contains(x):
        raise ValueError(f"source location {x.tolist()} lies outside the mesh")
    if mesh.on_boundary(x):
        raise ValueError(f"source location {x.tolist()} lies on the boundary")
    idx, bary = mesh.locate(x)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, idx, bary)
    return out


def apply_dirichlet(matrix, rhs, boundary):
    """Eliminate homogeneous Dirichlet rows and columns symmetrically.

    Boundary rows and columns are zeroed, their diagonal set to one and the
    matching right-hand side entries set to zero.
    """
    A = sp.csr_matrix(matrix, copy=True)
    b = np.array(rhs, dtype=float, copy=True)
    boundary = np.asarray(boundary, dtype=np.int64)
    if boundary.size == 0:
        return A, b
    if boundary.min() < 0 or boundary.max() >= A.shape[0]:
        raise ValueError("boundary index out of range")
    keep = np.ones(A.shape[0])
    keep[boundary] = 0.0
    D = sp.diags(keep)
    A = (D @ A @ D).tocsr()
    ident = np.zeros(A.shape[0])
    ident[boundary] = 1.0
    A = (A + sp.diags(ident)).tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    b[boundary] = 0.0
    return A, b


def evaluate_at_point(mesh: Mesh, nodal, x) -> float:
    idx, bary = mesh.locate(x)
    return float(np.dot(np.asarray(nodal)[idx], bary))


def interpolate(mesh: Mesh, f: Field) -> np.ndarray:
    """Nodal values of ``f`` (its P1 interpolant)."""
    return np.array(_eval_field(f, mesh.nodes), dtype=float).reshape(mesh.n_nodes)


def subdomain_mask(mesh: Mesh, region: Callable[[np.ndarray], bool], description: str = "") -> SubdomainMask:
    """Interior nodes whose coordinates satisfy ``region`` (called per point)."""
    interior = mesh.interior_nodes
    hits = [i for i in interior if region(mesh.nodes[i])]
    if not hits:
        raise ValueError(f"observation region {description or region!r} contains no interior nodes")
    idx = np.array(hits, dtype=np.int64)
    return SubdomainMask(node_indices=idx, description=description, coords=mesh.nodes[idx])

"""High-order quad/hex meshes, H1/L2 spaces and the element restriction.

Global vectors (L-vectors) are flat arrays of length ``vdim * ndofs`` laid
out component-major. Element vectors (E-vectors) have shape
``(vdim, NE, D, ..., D)`` with the local nodes in lexicographic order, x
fastest. Quadrature-point arrays have shape ``(NE, Q, ..., Q)`` and point
matrices are appended as trailing ``(d, d)`` axes with
``J[..., a, b] = dx_a / dxi_b``.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ale_minihydro.exceptions import ConfigError, DimensionMismatchError, InvertedElementError
from ale_minihydro.parameters import Continuity
from ale_minihydro.tensor_basis import (
    Basis1D,
    QuadratureRule1D,
    eval_basis,
    gauss_legendre,
    gauss_lobatto_nodes,
    interp,
    interp_grad,
)

logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-12


@dataclass(frozen=True)
class FiniteElementSpace:
    continuity: Continuity
    order: int
    dim: int
    dof_map: np.ndarray
    ndofs: int
    vdim: int = 1

    def __post_init__(self) -> None:
        if self.dof_map.shape[1] != self.d1d**self.dim:
            raise DimensionMismatchError("local dofs per element", self.d1d**self.dim, self.dof_map.shape[1])

    @property
    def d1d(self) -> int:
        return self.order + 1

    @property
    def ne(self) -> int:
        return self.dof_map.shape[0]

    @property
    def vsize(self) -> int:
        return self.vdim * self.ndofs

    @property
    def element_shape(self) -> tuple[int, ...]:
        return (self.vdim, self.ne) + (self.d1d,) * self.dim

    def vector(self, vdim: int) -> "FiniteElementSpace":
        return dataclasses.replace(self, vdim=vdim)

    @cached_property
    def multiplicity(self) -> np.ndarray:
        """Number of elements sharing each global DOF"""
        return np.bincount(self.dof_map.ravel(), minlength=self.ndofs).astype(np.float64)


def h1_space(dof_map: np.ndarray, order: int, dim: int, vdim: int = 1) -> FiniteElementSpace:
    dof_map = np.ascontiguousarray(dof_map, dtype=np.int64)
    ndofs = int(dof_map.max()) + 1
    if np.unique(dof_map).size != ndofs:
        raise ConfigError("H1 dof map leaves global indices unreferenced")
    return FiniteElementSpace(Continuity.H1, order, dim, dof_map, ndofs, vdim)


def l2_space(ne: int, order: int, dim: int, vdim: int = 1) -> FiniteElementSpace:
    nloc = (order + 1) ** dim
    dof_map = np.arange(ne * nloc, dtype=np.int64).reshape(ne, nloc)
    return FiniteElementSpace(Continuity.L2, order, dim, dof_map, ne * nloc, vdim)


def gather(space: FiniteElementSpace, u: np.ndarray) -> np.ndarray:
    """L-vector -> E-vector (the G operator)"""
    u = np.asarray(u)
    if u.size != space.vsize:
        raise DimensionMismatchError("global vector length", space.vsize, u.size)
    return u.reshape(space.vdim, space.ndofs)[:, space.dof_map].reshape(space.element_shape)


def scatter_add(space: FiniteElementSpace, e: np.ndarray) -> np.ndarray:
    """E-vector -> L-vector, summing shared contributions in ascending element order"""
    e = np.asarray(e)
    if e.size != space.vdim * space.dof_map.size:
        raise DimensionMismatchError("element vector size", space.vdim * space.dof_map.size, e.size)
    if space.continuity == Continuity.L2:
        return e.reshape(-1).astype(np.float64, copy=True)
    flat = e.reshape(space.vdim, -1)
    index = space.dof_map.ravel()
    out = np.empty((space.vdim, space.ndofs))
    for c in range(space.vdim):
        out[c] = np.bincount(index, weights=flat[c], minlength=space.ndofs)
    return out.reshape(-1)


@dataclass(frozen=True)
class Faces:
    """Face topology. Interior faces list side 2 nodes aligned to side 1's ordering."""

    elem1: np.ndarray
    dir1: np.ndarray
    side1: np.ndarray
    nodes1: np.ndarray
    elem2: np.ndarray
    nodes2: np.ndarray

    @property
    def interior(self) -> np.ndarray:
        return self.elem2 >= 0

    @property
    def count(self) -> int:
        return self.elem1.size


def face_local_nodes(order: int, dim: int, direction: int, side: int) -> np.ndarray:
    """Local indices of the nodes on face ``xi_direction = -1/+1``, x fastest"""
    local = np.arange((order + 1) ** dim).reshape((order + 1,) * dim)
    return np.take(local, side * order, axis=dim - 1 - direction).ravel()


@dataclass(frozen=True)
class HighOrderMesh:
    """Nodal mesh: scalar H1 space of the geometry plus node coordinates ``x`` (d, ndofs)"""

    h1: FiniteElementSpace
    x: np.ndarray

    def __post_init__(self) -> None:
        if self.x.shape != (self.dim, self.h1.ndofs):
            raise DimensionMismatchError("node coordinates", (self.dim, self.h1.ndofs), self.x.shape)

    @property
    def dim(self) -> int:
        return self.h1.dim

    @property
    def order(self) -> int:
        return self.h1.order

    @property
    def ne(self) -> int:
        return self.h1.ne

    @property
    def nnodes(self) -> int:
        return self.h1.ndofs

    @property
    def vertices(self) -> np.ndarray:
        """Corner node indices per element"""
        p = self.order
        corners = np.zeros(2**self.dim, dtype=np.int64)
        for c in range(2**self.dim):
            corners[c] = sum(((c >> b) & 1) * p * (p + 1) ** b for b in range(self.dim))
        return self.h1.dof_map[:, corners]

    def with_coords(self, x: np.ndarray) -> "HighOrderMesh":
        return HighOrderMesh(self.h1, np.asarray(x, dtype=np.float64).reshape(self.dim, -1))

    def coordinate_space(self) -> FiniteElementSpace:
        return self.h1.vector(self.dim)

    @cached_property
    def faces(self) -> Faces:
        return build_faces(self.h1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        f = self.faces
        bdr = ~f.interior
        return np.unique(self.h1.dof_map[f.elem1[bdr, None], f.nodes1[bdr]])

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x.min(axis=1), self.x.max(axis=1)

    def wall_dofs(self) -> np.ndarray:
        """Vector dofs (component-major) of boundary nodes sitting on a box wall normal to that component"""
        lo, hi = self.bounding_box()
        nodes = self.boundary_nodes
        dofs = []
        for a in range(self.dim):
            scale = max(hi[a] - lo[a], 1.0)
            coord = self.x[a, nodes]
            on_wall = (np.abs(coord - lo[a]) <= BOUNDARY_TOL * scale) | (
                np.abs(coord - hi[a]) <= BOUNDARY_TOL * scale
            )
            dofs.append(a * self.nnodes + nodes[on_wall])
        return np.concatenate(dofs)

    def boundary_vdofs(self) -> np.ndarray:
        """All components of every boundary node"""
        nodes = self.boundary_nodes
        return np.concatenate([a * self.nnodes + nodes for a in range(self.dim)])


def build_faces(h1: FiniteElementSpace) -> Faces:
    p, dim = h1.order, h1.dim
    seen: dict[tuple[int, ...], int] = {}
    elem1, dir1, side1, nodes1, elem2, nodes2 = [], [], [], [], [], []
    local = {(b, s): face_local_nodes(p, dim, b, s) for b in range(dim) for s in (0, 1)}
    for e in range(h1.ne):
        for b in range(dim):
            for s in (0, 1):
                ids = h1.dof_map[e, local[b, s]]
                key = tuple(sorted(ids.tolist()))
                k = seen.get(key)
                if k is None:
                    seen[key] = len(elem1)
                    elem1.append(e)
                    dir1.append(b)
                    side1.append(s)
                    nodes1.append(local[b, s])
                    elem2.append(-1)
                    nodes2.append(np.full(local[b, s].size, -1))
                    continue
                if elem2[k] >= 0:
                    raise ConfigError(f"non-conforming mesh: face shared by more than two elements at element {e}")
                position = {gid: i for i, gid in enumerate(ids.tolist())}
                first = h1.dof_map[elem1[k], nodes1[k]]
                elem2[k] = e
                nodes2[k] = np.array([local[b, s][position[g]] for g in first.tolist()])
    return Faces(
        elem1=np.array(elem1, dtype=np.int64),
        dir1=np.array(dir1, dtype=np.int64),
        side1=np.array(side1, dtype=np.int64),
        nodes1=np.array(nodes1, dtype=np.int64),
        elem2=np.array(elem2, dtype=np.int64),
        nodes2=np.array(nodes2, dtype=np.int64),
    )


def cartesian_mesh(
    dim: int,
    extents: tuple[float, ...],
    element_counts: tuple[int, ...],
    order: int,
    origin: tuple[float, ...] | None = None,
) -> HighOrderMesh:
    """Axis-aligned box mesh with nodes at tensor Lobatto points; elements numbered x fastest"""
    if dim not in (2, 3):
        raise ConfigError(f"meshes are 2D or 3D, got dim={dim}")
    if len(extents) != dim or len(element_counts) != dim:
        raise DimensionMismatchError("extents/element counts", dim, (len(extents), len(element_counts)))
    if any(n < 1 for n in element_counts):
        raise ConfigError(f"element counts must be >= 1, got {element_counts}")
    if order < 1:
        raise ConfigError(f"mesh order must be >= 1, got {order}")
    origin = origin or (0.0,) * dim
    ref = (gauss_lobatto_nodes(order) + 1.0) / 2.0
    axes = []
    for a in range(dim):
        h = extents[a] / element_counts[a]
        ticks = np.concatenate([[0.0], (np.arange(element_counts[a])[:, None] + ref[1:]).ravel()])
        axes.append(origin[a] + h * ticks)
    grid = np.meshgrid(*axes[::-1], indexing="ij")
    x = np.stack([g.ravel() for g in grid[::-1]])

    n_nodes = [n * order + 1 for n in element_counts]
    strides = [math.prod(n_nodes[:a]) for a in range(dim)]
    e_idx = np.indices(element_counts[::-1]).reshape(dim, -1)[::-1]
    l_idx = np.indices((order + 1,) * dim).reshape(dim, -1)[::-1]
    dof_map = np.zeros((e_idx.shape[1], l_idx.shape[1]), dtype=np.int64)
    for a in range(dim):
        dof_map += (e_idx[a][:, None] * order + l_idx[a][None, :]) * strides[a]
    mesh = HighOrderMesh(h1_space(dof_map, order, dim), x)
    logger.debug(f"cartesian mesh: dim={dim} elements={mesh.ne} nodes={mesh.nnodes} order={order}")
    return mesh


def quadrature_weights(quad: QuadratureRule1D, dim: int) -> np.ndarray:
    w = quad.weights
    for _ in range(dim - 1):
        w = np.multiply.outer(w, quad.weights)
    return w


def mesh_basis(mesh: HighOrderMesh, quad: QuadratureRule1D) -> Basis1D:
    return eval_basis(gauss_lobatto_nodes(mesh.order), quad)


@dataclass(frozen=True)
class GeometricFactors:
    J: np.ndarray
    detJ: np.ndarray
    Jinv: np.ndarray
    weights: np.ndarray

    @property
    def wdetJ(self) -> np.ndarray:
        return self.weights * self.detJ


def first_nonpositive(detJ: np.ndarray) -> tuple[int, int, float] | None:
    """(element, point, det) of the first non-positive determinant, if any"""
    flat = detJ.reshape(detJ.shape[0], -1)
    bad = np.argwhere(flat <= 0)
    if bad.size == 0:
        return None
    e, q = bad[0]
    return int(e), int(q), float(flat[e, q])


def element_jacobians(mesh: HighOrderMesh, basis: Basis1D) -> np.ndarray:
    """(NE, Q^d, d, d) physical Jacobians at the points of ``basis``"""
    xe = gather(mesh.coordinate_space(), mesh.x)
    return np.moveaxis(interp_grad(basis, xe, mesh.dim), 0, -2)


def compute_geometric_factors(
    mesh: HighOrderMesh, quad: QuadratureRule1D, check: bool = True
) -> GeometricFactors:
    J = element_jacobians(mesh, mesh_basis(mesh, quad))
    detJ = np.linalg.det(J)
    if check and (bad := first_nonpositive(detJ)) is not None:
        raise InvertedElementError(*bad)
    # inverted points get a placeholder inverse when unchecked
    safe = np.where((detJ > 0)[..., None, None], J, np.eye(mesh.dim))
    return GeometricFactors(
        J=J, detJ=detJ, Jinv=np.linalg.inv(safe), weights=quadrature_weights(quad, mesh.dim)
    )


def min_det_jacobian(mesh: HighOrderMesh, quad: QuadratureRule1D) -> float:
    return float(np.linalg.det(element_jacobians(mesh, mesh_basis(mesh, quad))).min())


def element_volumes(mesh: HighOrderMesh, quad: QuadratureRule1D | None = None) -> np.ndarray:
    quad = quad or gauss_legendre(mesh.order + 2)
    geom = compute_geometric_factors(mesh, quad)
    return geom.wdetJ.reshape(mesh.ne, -1).sum(axis=1)


def element_diameters(mesh: HighOrderMesh) -> np.ndarray:
    """Largest corner-to-corner distance per element"""
    corners = mesh.x[:, mesh.vertices]
    diff = corners[:, :, :, None] - corners[:, :, None, :]
    return np.sqrt((diff**2).sum(axis=0)).reshape(mesh.ne, -1).max(axis=1)


def node_length_scale(mesh: HighOrderMesh) -> np.ndarray:
    """Per-node average diameter of the adjacent elements"""
    diam = element_diameters(mesh)
    contrib = np.repeat(diam[:, None], mesh.h1.dof_map.shape[1], axis=1)
    total = np.bincount(mesh.h1.dof_map.ravel(), weights=contrib.ravel(), minlength=mesh.nnodes)
    return total / mesh.h1.multiplicity


def interior_nodes(mesh: HighOrderMesh) -> np.ndarray:
    mask = np.ones(mesh.nnodes, dtype=bool)
    mask[mesh.boundary_nodes] = False
    return np.flatnonzero(mask)


def perturb_interior(mesh: HighOrderMesh, fraction: float, seed: int = 0) -> HighOrderMesh:
    """Move interior nodes by uniform noise of amplitude ``fraction`` times the local size"""
    rng = np.random.default_rng(seed)
    h = node_length_scale(mesh) / mesh.order
    nodes = interior_nodes(mesh)
    x = mesh.x.copy()
    x[:, nodes] += fraction * h[nodes] * rng.uniform(-1.0, 1.0, size=(mesh.dim, nodes.size))
    return mesh.with_coords(x)


def read_mesh(path: str | Path) -> HighOrderMesh:
    """Read the text mesh format: header lines, element node lists, node coordinates"""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        if lines[0][0] != "dim" or lines[0][2] != "order" or lines[1][0] != "elements" or lines[1][2] != "nodes":
            raise ConfigError(f"{path}: malformed header")
        dim, order = int(lines[0][1]), int(lines[0][3])
        ne, nn = int(lines[1][1]), int(lines[1][3])
        conn = np.array([[int(t) for t in ln] for ln in lines[2 : 2 + ne]], dtype=np.int64)
        coords = np.array([[float(t) for t in ln] for ln in lines[2 + ne : 2 + ne + nn]])
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot parse mesh file: {exc}") from exc
    if conn.shape != (ne, (order + 1) ** dim) or coords.shape != (nn, dim):
        raise ConfigError(f"{path}: element or node table has the wrong shape")
    if conn.min() < 0 or conn.max() >= nn:
        raise ConfigError(f"{path}: node index out of range")
    return HighOrderMesh(h1_space(conn, order, dim), coords.T.copy())


def write_mesh(mesh: HighOrderMesh, path: str | Path) -> None:
    out = [f"dim {mesh.dim} order {mesh.order}", f"elements {mesh.ne} nodes {mesh.nnodes}"]
    out += [" ".join(str(i) for i in row) for row in mesh.h1.dof_map]
    out += [" ".join(repr(float(c)) for c in node) for node in mesh.x.T]
    Path(path).write_text("\n".join(out) + "\n")


def point_coordinates(mesh: HighOrderMesh, basis: Basis1D) -> np.ndarray:
    """(NE, Q^d, d) physical coordinates at the points of ``basis``"""
    xe = gather(mesh.coordinate_space(), mesh.x)
    return np.moveaxis(interp(basis, xe, mesh.dim), 0, -1)


def nodal_coordinates(mesh: HighOrderMesh, order: int) -> np.ndarray:
    """(NE, D^d, d) physical coordinates of the Lobatto nodes of an order-``order`` element"""
    nodes = gauss_lobatto_nodes(order)
    at_nodes = eval_basis(gauss_lobatto_nodes(mesh.order), QuadratureRule1D(nodes, np.ones_like(nodes)))
    return point_coordinates(mesh, at_nodes)


def element_centroids(mesh: HighOrderMesh) -> np.ndarray:
    return mesh.x[:, mesh.vertices].mean(axis=2).T

"""Remap of the hydro fields from the Lagrangian mesh onto the optimized mesh.

The mesh moves along ``x(tau) = x_start + tau * u`` for ``tau`` in [0, 1]
while the fields stay fixed in space. Velocity is transported with the
matrix-free continuous Galerkin operators. The thermodynamic DG fields are
transported as conserved nodal products ``U_i = m_i w_i`` (``m`` the lumped
element volumes, evolved with the same operator) with an assembled upwind
convection matrix, a bound-preserving low-order update and a flux-corrected
high-order correction.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from ale_minihydro.exceptions import (
    AdmissibleStepError,
    DimensionMismatchError,
    InvertedElementError,
    NonPositiveVolumeError,
)
from ale_minihydro.lagrange_hydro import HydroState, LagrangianHydro
from ale_minihydro.mesh_fespace import (
    FiniteElementSpace,
    HighOrderMesh,
    compute_geometric_factors,
    gather,
    node_length_scale,
    quadrature_weights,
)
from ale_minihydro.models import FieldExtrema, RemapConfig, RemapDiagnostics
from ale_minihydro.pa_operators import (
    ConstrainedOperator,
    assemble_blocks,
    cg_solve,
    convection_setup,
    mass_setup,
)
from ale_minihydro.tensor_basis import (
    Basis1D,
    interp,
    interp_t,
    kron_factors,
    lagrange_matrices,
    lobatto_basis,
)

logger = logging.getLogger(__name__)

MAX_STEP_DOUBLINGS = 4
DENSITY_FLOOR = 1e-12


def mesh_velocity(x_start: np.ndarray, x_end: np.ndarray) -> np.ndarray:
    """Constant pseudo-time mesh velocity ``x_end - x_start``"""
    x_start, x_end = np.asarray(x_start), np.asarray(x_end)
    if x_start.shape != x_end.shape:
        raise DimensionMismatchError("mesh positions", x_start.shape, x_end.shape)
    return x_end - x_start


def required_pseudo_steps(mesh: HighOrderMesh, displacement: np.ndarray, pseudo_cfl: float) -> int:
    """Fewest steps keeping each node's move per step under ``pseudo_cfl`` times its spacing"""
    h = node_length_scale(mesh) / mesh.order
    moved = np.linalg.norm(np.reshape(displacement, (mesh.dim, -1)), axis=0)
    return max(1, int(np.ceil(np.max(moved / (pseudo_cfl * h)))))


def _velocity_at_points(mesh: HighOrderMesh, basis: Basis1D, u: np.ndarray) -> np.ndarray:
    ue = gather(mesh.coordinate_space(), u)
    return np.moveaxis(interp(basis, ue, mesh.dim), 0, -1)


def cg_advection_step(
    mesh: HighOrderMesh,
    space: FiniteElementSpace,
    values: np.ndarray,
    u: np.ndarray,
    dtau: float,
    tau: float = 0.0,
    coefficient: float | np.ndarray = 1.0,
    essential: np.ndarray | None = None,
    q1d: int | None = None,
    rel_tol: float = 1e-12,
    **kwargs,
) -> np.ndarray:
    """One Heun step of ``M dw/dtau = K w`` for a continuous field on the moving mesh.

    ``mesh`` is the start of the path (``tau = 0``). ``coefficient`` weights
    both mass and convection (density for momentum). Essential DOFs are held.
    """
    basis = lobatto_basis(space.order, q1d or mesh.order + 2)
    u_flat = np.reshape(u, -1)
    essential = np.zeros(0, dtype=np.int64) if essential is None else essential

    def rate(w: np.ndarray, t: float) -> np.ndarray:
        moved = mesh.with_coords(mesh.x + t * np.reshape(u, mesh.x.shape))
        geom = compute_geometric_factors(moved, basis.quad)
        u_q = _velocity_at_points(moved, basis, u_flat)
        mass = ConstrainedOperator(mass_setup(space, basis, geom, coefficient, **kwargs), essential)
        conv = convection_setup(space, basis, geom, u_q, coefficient, **kwargs)
        rhs = mass.eliminate_rhs(conv.mult(w))
        dw, _ = cg_solve(mass.mult, rhs, precond=mass.diagonal(), rel_tol=rel_tol)
        return dw

    values = np.asarray(values, dtype=np.float64)
    k1 = rate(values, tau)
    k2 = rate(values + dtau * k1, tau + dtau)
    return values + 0.5 * dtau * (k1 + k2)


def momentum_remap_step(
    mesh: HighOrderMesh,
    v: np.ndarray,
    u: np.ndarray,
    dtau: float,
    tau: float = 0.0,
    density: float | np.ndarray = 1.0,
    essential: np.ndarray | None = None,
    **kwargs,
) -> np.ndarray:
    """Velocity transport with density-weighted PA mass and convection"""
    return cg_advection_step(
        mesh, mesh.coordinate_space(), v, u, dtau, tau=tau, coefficient=density, essential=essential, **kwargs
    )


@dataclass(frozen=True)
class FaceQuadrature:
    """Face point tables shared by every pseudo-step on one mesh topology.

    For interior face ``f``, ``perm[f]`` maps the points of side 1 (in side
    1's tangential order) to side 2's own face-point numbering.
    """

    elem1: np.ndarray
    dir1: np.ndarray
    side1: np.ndarray
    elem2: np.ndarray
    dir2: np.ndarray
    side2: np.ndarray
    perm: np.ndarray
    weights: np.ndarray


def _face_orientation(nodes2: np.ndarray, order: int, dim: int, dir1: int, q1d: int):
    n = order + 1
    coords = np.stack([(nodes2 // n**c) % n for c in range(dim)])
    dir2 = int(np.flatnonzero(np.all(coords == coords[:, :1], axis=1))[0])
    side2 = int(coords[dir2, 0] == order)
    tangential2 = [c for c in range(dim) if c != dir2]
    q_idx = np.indices((q1d,) * (dim - 1)).reshape(dim - 1, -1)[::-1]
    perm = np.zeros(q_idx.shape[1], dtype=np.int64)
    for r in range(dim - 1):
        step = coords[:, n**r] - coords[:, 0]
        c2 = int(np.flatnonzero(step)[0])
        q = q_idx[r] if step[c2] > 0 else q1d - 1 - q_idx[r]
        perm += q * q1d ** tangential2.index(c2)
    return dir2, side2, perm


def face_quadrature(mesh: HighOrderMesh, q1d: int) -> FaceQuadrature:
    faces = mesh.faces
    nf = faces.count
    dir2 = np.full(nf, -1, dtype=np.int64)
    side2 = np.full(nf, -1, dtype=np.int64)
    perm = np.zeros((nf, q1d ** (mesh.dim - 1)), dtype=np.int64)
    for f in np.flatnonzero(faces.interior):
        dir2[f], side2[f], perm[f] = _face_orientation(
            faces.nodes2[f], mesh.order, mesh.dim, int(faces.dir1[f]), q1d
        )
    quad = lobatto_basis(mesh.order, q1d).quad
    return FaceQuadrature(
        elem1=faces.elem1,
        dir1=faces.dir1,
        side1=faces.side1,
        elem2=faces.elem2,
        dir2=dir2,
        side2=side2,
        perm=perm,
        weights=np.ravel(quadrature_weights(quad, mesh.dim - 1)),
    )


def _face_matrix(basis: Basis1D, dim: int, direction: int, side: int, deriv: int | None = None):
    """(Q^{d-1}, D^d) values (or ``deriv`` derivatives) of the element basis on one face"""
    B_end, G_end = lagrange_matrices(basis.nodes, np.array([-1.0, 1.0]))
    factors = []
    for c in range(dim):
        if c == direction:
            factors.append((G_end if deriv == c else B_end)[side : side + 1])
        else:
            factors.append(basis.G if deriv == c else basis.B)
    return kron_factors(factors)


def _face_fluxes(mesh: HighOrderMesh, basis: Basis1D, fq: FaceQuadrature, u: np.ndarray) -> np.ndarray:
    """(NF, Q^{d-1}) weighted normal mesh velocity ``u . n dA`` outward from side 1"""
    dim = mesh.dim
    u2 = np.reshape(u, (dim, -1))
    flux = np.zeros((fq.elem1.size, fq.weights.size))
    for b in range(dim):
        for s in (0, 1):
            sel = np.flatnonzero((fq.dir1 == b) & (fq.side1 == s))
            if sel.size == 0:
                continue
            local = mesh.h1.dof_map[fq.elem1[sel]]
            xe, ue = mesh.x[:, local], u2[:, local]
            J = np.stack(
                [np.einsum("qk,afk->fqa", _face_matrix(basis, dim, b, s, c), xe) for c in range(dim)],
                axis=-1,
            )
            u_f = np.einsum("qk,afk->fqa", _face_matrix(basis, dim, b, s), ue)
            adj_u = np.linalg.det(J)[..., None] * np.linalg.solve(J, u_f[..., None])[..., 0]
            flux[sel] = (2 * s - 1) * fq.weights * adj_u[..., b]
    return flux


@dataclass(frozen=True)
class DGAdvectionMatrices:
    """Assembled DG transport operators on one pseudo-time mesh.

    ``K`` is the conservative upwind convection: ``d(M w)/dtau = K w``. Its
    column sums vanish and ``K 1`` is the rate of change of the lumped volumes.
    """

    space: FiniteElementSpace
    mass_blocks: np.ndarray
    K: sp.csr_array
    neighbors: np.ndarray

    @cached_property
    def M(self) -> sp.csr_array:
        dofs = self.space.dof_map
        return assemble_blocks(self.mass_blocks, dofs, dofs, (self.space.ndofs, self.space.ndofs))

    @cached_property
    def lumped(self) -> np.ndarray:
        return self.mass_blocks.sum(axis=2).reshape(-1)

    @cached_property
    def volume_rate(self) -> np.ndarray:
        return self.K @ np.ones(self.space.ndofs)

    @cached_property
    def advective(self) -> sp.csr_array:
        """``K - diag(K 1)``: zero row sums, ``m dw/dtau = advective @ w``"""
        return sp.csr_array(self.K - sp.diags_array(self.volume_rate))

    @cached_property
    def dissipation(self) -> sp.csr_array:
        """Discrete upwinding: ``D_ij = max(0, -K_ij, -K_ji)``, rows summing to zero"""
        off = sp.csr_array(self.K - sp.diags_array(self.K.diagonal()))
        D = sp.csr_array((-off).maximum(-off.T))
        D.data = np.maximum(D.data, 0.0)
        D.eliminate_zeros()
        return sp.csr_array(D - sp.diags_array(D @ np.ones(self.space.ndofs)))

    @cached_property
    def low_order(self) -> sp.csr_array:
        return sp.csr_array(self.K + self.dissipation)

    def max_admissible_step(self, masses: np.ndarray | None = None) -> float:
        masses = self.lumped if masses is None else masses
        diag = self.low_order.diagonal()
        outflow = diag < 0
        if not np.any(outflow):
            return np.inf
        return float(np.min(masses[outflow] / -diag[outflow]))


def assemble_dg_advection(
    space: FiniteElementSpace,
    basis: Basis1D,
    mesh: HighOrderMesh,
    u: np.ndarray,
    fq: FaceQuadrature | None = None,
) -> DGAdvectionMatrices:
    """Mass blocks and upwind convection of a DG space on ``mesh`` moving with ``u``"""
    dim = space.dim
    fq = fq or face_quadrature(mesh, basis.q1d)
    geom = compute_geometric_factors(mesh, basis.quad)
    mesh_basis = lobatto_basis(mesh.order, basis.q1d)
    u_q = _velocity_at_points(mesh, mesh_basis, np.reshape(u, -1))
    mass_blocks = mass_setup(space, basis, geom).element_matrices()
    volume = -np.swapaxes(convection_setup(space, basis, geom, u_q).element_matrices(), 1, 2)

    flux = _face_fluxes(mesh, mesh_basis, fq, u)
    tables = {(b, s): _face_matrix(basis, dim, b, s) for b in range(dim) for s in (0, 1)}
    phi1 = np.stack([tables[b, s] for b, s in zip(fq.dir1, fq.side1, strict=True)])
    inflow, outflow = np.maximum(flux, 0.0), np.minimum(flux, 0.0)
    # boundary faces take the interior trace both ways
    interior = fq.elem2 >= 0
    outflow[~interior] = flux[~interior]
    dofs = space.dof_map
    shape = (space.ndofs, space.ndofs)
    K = assemble_blocks(volume, dofs, dofs, shape)
    e1 = fq.elem1
    K += assemble_blocks(np.einsum("fqi,fq,fqj->fij", phi1, outflow, phi1), dofs[e1], dofs[e1], shape)

    neighbors = np.stack([fq.elem1[interior], fq.elem2[interior]])
    if np.any(interior):
        f_in = np.flatnonzero(interior)
        e1, e2 = fq.elem1[f_in], fq.elem2[f_in]
        p1 = phi1[f_in]
        p2 = np.stack([tables[fq.dir2[f], fq.side2[f]][fq.perm[f]] for f in f_in])
        fin, fout = inflow[f_in], outflow[f_in]
        K += assemble_blocks(np.einsum("fqi,fq,fqj->fij", p1, fin, p2), dofs[e1], dofs[e2], shape)
        K -= assemble_blocks(np.einsum("fqi,fq,fqj->fij", p2, fin, p2), dofs[e2], dofs[e2], shape)
        K -= assemble_blocks(np.einsum("fqi,fq,fqj->fij", p2, fout, p1), dofs[e2], dofs[e1], shape)
    return DGAdvectionMatrices(space=space, mass_blocks=mass_blocks, K=sp.csr_array(K), neighbors=neighbors)


@dataclass(frozen=True)
class FieldBounds:
    """Per-DOF admissible range from the element and its face neighbours"""

    lower: np.ndarray
    upper: np.ndarray

    def contains(self, w: np.ndarray, slack: float = 1e-12) -> bool:
        tol = slack * max(1.0, float(np.max(np.abs(w))))
        return bool(np.all(w >= self.lower - tol) and np.all(w <= self.upper + tol))


def field_bounds(matrices: DGAdvectionMatrices, w: np.ndarray) -> FieldBounds:
    ne = matrices.space.ne
    we = np.reshape(w, (ne, -1))
    lo, hi = we.min(axis=1), we.max(axis=1)
    elem_lo, elem_hi = lo.copy(), hi.copy()
    a, b = matrices.neighbors
    np.minimum.at(lo, a, elem_lo[b])
    np.minimum.at(lo, b, elem_lo[a])
    np.maximum.at(hi, a, elem_hi[b])
    np.maximum.at(hi, b, elem_hi[a])
    nloc = we.shape[1]
    return FieldBounds(lower=np.repeat(lo, nloc), upper=np.repeat(hi, nloc))


def low_order_update(
    matrices: DGAdvectionMatrices, w: np.ndarray, dtau: float, masses: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Bound-preserving forward-Euler step; returns the new values and new lumped volumes"""
    masses = matrices.lumped if masses is None else masses
    max_dtau = matrices.max_admissible_step(masses)
    if dtau > max_dtau:
        raise AdmissibleStepError(dtau, max_dtau)
    new_masses = masses + dtau * matrices.volume_rate
    return (masses * w + dtau * (matrices.low_order @ w)) / new_masses, new_masses


def _element_solve(matrices: DGAdvectionMatrices, rhs: np.ndarray) -> np.ndarray:
    ne = matrices.space.ne
    return np.linalg.solve(matrices.mass_blocks, rhs.reshape(ne, -1, 1))[..., 0].reshape(-1)


def antidiffusive_fluxes(matrices: DGAdvectionMatrices, w: np.ndarray, dtau: float) -> sp.csr_array:
    """``f_ij = dtau [M_ij (dw_i - dw_j) + D_ij (w_i - w_j)]`` with ``dw`` the consistent-mass rate"""
    rate = _element_solve(matrices, matrices.advective @ w)
    parts = []
    for A, z in ((matrices.M.tocoo(), rate), (matrices.dissipation.tocoo(), w)):
        off = A.row != A.col
        r, c = A.row[off], A.col[off]
        parts.append((dtau * A.data[off] * (z[r] - z[c]), r, c))
    data = np.concatenate([p[0] for p in parts])
    rows = np.concatenate([p[1] for p in parts])
    cols = np.concatenate([p[2] for p in parts])
    n = matrices.space.ndofs
    return sp.coo_array((data, (rows, cols)), shape=(n, n)).tocsr()


def high_order_update(
    matrices: DGAdvectionMatrices,
    w: np.ndarray,
    dtau: float,
    masses: np.ndarray | None = None,
    fluxes: sp.csr_array | None = None,
) -> np.ndarray:
    """Low-order update plus every antidiffusive flux, unlimited"""
    w_low, new_masses = low_order_update(matrices, w, dtau, masses)
    fluxes = antidiffusive_fluxes(matrices, w, dtau) if fluxes is None else fluxes
    return w_low + (fluxes @ np.ones(w.size)) / new_masses


@dataclass(frozen=True)
class FctResult:
    values: np.ndarray
    limited_fraction: float


def fct_correct(
    matrices: DGAdvectionMatrices,
    w: np.ndarray,
    w_low: np.ndarray,
    w_high: np.ndarray,
    bounds: FieldBounds,
    dtau: float,
    masses: np.ndarray | None = None,
    fluxes: sp.csr_array | None = None,
) -> FctResult:
    """Zalesak limiting of the antidiffusive fluxes between ``w_low`` and ``w_high``"""
    if bounds.contains(w_high):
        return FctResult(values=np.array(w_high), limited_fraction=0.0)
    masses = matrices.lumped if masses is None else masses
    new_masses = masses + dtau * matrices.volume_rate
    fluxes = (antidiffusive_fluxes(matrices, w, dtau) if fluxes is None else fluxes).tocoo()
    r, c, f = fluxes.row, fluxes.col, fluxes.data
    n = w.size
    p_plus = np.bincount(r, weights=np.maximum(f, 0.0), minlength=n)
    p_minus = np.bincount(r, weights=np.minimum(f, 0.0), minlength=n)
    q_plus = np.maximum(new_masses * (bounds.upper - w_low), 0.0)
    q_minus = np.minimum(new_masses * (bounds.lower - w_low), 0.0)
    r_plus = np.ones(n)
    r_minus = np.ones(n)
    np.divide(q_plus, p_plus, out=r_plus, where=p_plus > 0)
    np.divide(q_minus, p_minus, out=r_minus, where=p_minus < 0)
    r_plus, r_minus = np.minimum(r_plus, 1.0), np.minimum(r_minus, 1.0)
    alpha = np.where(f > 0, np.minimum(r_plus[r], r_minus[c]), np.minimum(r_minus[r], r_plus[c]))
    correction = np.bincount(r, weights=alpha * f, minlength=n)
    active = f != 0
    limited = float(np.mean(alpha[active] < 1.0)) if np.any(active) else 0.0
    return FctResult(values=w_low + correction / new_masses, limited_fraction=limited)


@dataclass
class _RemapRun:
    hydro: LagrangianHydro
    config: RemapConfig
    mesh: HighOrderMesh
    u: np.ndarray
    fq: FaceQuadrature
    limited: list[float]

    def matrices_at(self, tau: float) -> DGAdvectionMatrices:
        moved = self.mesh.with_coords(self.mesh.x + tau * np.reshape(self.u, self.mesh.x.shape))
        return assemble_dg_advection(self.hydro.thermo, self.hydro.basis_t, moved, self.u, self.fq)

    def stage(self, matrices, fields, masses, dtau):
        out = []
        for w in fields:
            w_low, new_masses = low_order_update(matrices, w, dtau, masses)
            fluxes = antidiffusive_fluxes(matrices, w, dtau)
            w_high = high_order_update(matrices, w, dtau, masses, fluxes)
            if not self.config.use_limiter:
                out.append(w_high)
                continue
            bounds = field_bounds(matrices, w)
            result = fct_correct(matrices, w, w_low, w_high, bounds, dtau, masses, fluxes)
            self.limited.append(result.limited_fraction)
            out.append(result.values)
        return out, new_masses

    def density_at_points(self, rho: np.ndarray) -> np.ndarray:
        hydro = self.hydro
        return interp(hydro.basis_t, gather(hydro.thermo, rho)[0], hydro.dim)

    def run(self, steps: int, v: np.ndarray, masses: np.ndarray, conserved: list[np.ndarray]):
        dtau = 1.0 / steps
        hydro = self.hydro
        kwargs = {"place": hydro.place, "memory": hydro.memory}
        for k in range(steps):
            tau = k * dtau
            fields = [c / masses for c in conserved]
            v = momentum_remap_step(
                self.mesh,
                v,
                self.u,
                dtau,
                tau=tau,
                density=self.density_at_points(fields[0]),
                essential=hydro.essential,
                q1d=hydro.q1d,
                rel_tol=hydro.cg_rel_tol,
                **kwargs,
            )
            stage1, m1 = self.stage(self.matrices_at(tau), fields, masses, dtau)
            stage2, m2 = self.stage(self.matrices_at(tau + dtau), stage1, m1, dtau)
            conserved = [0.5 * (c + m2 * w2) for c, w2 in zip(conserved, stage2, strict=True)]
            masses = 0.5 * (masses + m2)
        return v, masses, conserved


def _nodal_integrals(hydro: LagrangianHydro, weighted_q: np.ndarray) -> np.ndarray:
    """``int w phi_i`` over the thermodynamic basis for point data already scaled by ``w detJ``"""
    return interp_t(hydro.basis_t, weighted_q, hydro.dim).reshape(-1)


def lumped_volumes(hydro: LagrangianHydro, x: np.ndarray) -> np.ndarray:
    """``int phi_i detJ`` of every thermodynamic DOF on the mesh with coordinates ``x``"""
    weights = quadrature_weights(hydro.quad, hydro.dim)
    return _nodal_integrals(hydro, weights * hydro.geometry(np.reshape(x, -1)).detJ)


def check_remap_path(
    hydro: LagrangianHydro, x_start: np.ndarray, x_target: np.ndarray, samples: int = 4
) -> None:
    """Raise :class:`NonPositiveVolumeError` if a sampled mesh on the path has a non-positive lumped volume.

    High-order bases can give a valid mesh (positive ``detJ``) a negative
    lumped volume; the low-order transport has no admissible step there.
    """
    x_start = np.reshape(np.asarray(x_start, dtype=np.float64), -1)
    u = mesh_velocity(x_start, np.reshape(np.asarray(x_target, dtype=np.float64), -1))
    for k in range(samples + 1):
        tau = k / samples
        volumes = lumped_volumes(hydro, x_start + tau * u)
        dof = int(np.argmin(volumes))
        if volumes[dof] <= 0:
            raise NonPositiveVolumeError(dof, float(volumes[dof]), tau)


def admissible_target(
    hydro: LagrangianHydro, x_start: np.ndarray, x_target: np.ndarray, max_halvings: int = 8
) -> tuple[np.ndarray, float]:
    """Pull ``x_target`` back toward ``x_start`` until the remap path passes :func:`check_remap_path`.

    Returns the accepted target and the fraction of the displacement kept;
    ``(x_start, 0.0)`` when every halving is rejected.
    """
    x_start = np.reshape(np.asarray(x_start, dtype=np.float64), -1)
    u = mesh_velocity(x_start, np.reshape(np.asarray(x_target, dtype=np.float64), -1))
    theta = 1.0
    for _ in range(max_halvings + 1):
        candidate = x_start + theta * u
        try:
            check_remap_path(hydro, x_start, candidate)
            return candidate, theta
        except (NonPositiveVolumeError, InvertedElementError) as exc:
            logger.debug(f"remap target at fraction {theta:g} rejected: {exc}")
        theta *= 0.5
    return x_start.copy(), 0.0


def _extrema(name: str, before: np.ndarray, after: np.ndarray) -> FieldExtrema:
    return FieldExtrema(
        field=name,
        min_before=float(before.min()),
        max_before=float(before.max()),
        min_after=float(after.min()),
        max_after=float(after.max()),
    )


def remap_all(
    hydro: LagrangianHydro,
    state: HydroState,
    x_target: np.ndarray,
    config: RemapConfig | None = None,
) -> tuple[HydroState, RemapDiagnostics]:
    """Transfer velocity, density and energy of ``state`` onto the mesh ``x_target``.

    Total mass and total internal energy are conserved; the kinetic energy
    change is reported for the caller to account for. A target whose path
    crosses a non-positive lumped volume raises :class:`NonPositiveVolumeError`;
    see :func:`admissible_target`.
    """
    config = config or RemapConfig()
    dim = hydro.dim
    x_target = np.reshape(np.asarray(x_target, dtype=np.float64), -1)
    u = mesh_velocity(state.x, x_target)
    before = hydro.energies(state)

    weights = quadrature_weights(hydro.quad, dim)
    geom = hydro.geometry(state.x)
    masses = _nodal_integrals(hydro, weights * geom.detJ)
    mass_rho = _nodal_integrals(hydro, weights * state.qdata0)
    mass_ie = _nodal_integrals(hydro, weights * state.qdata0 * hydro.energy_at_points(state.e))
    rho0, eps0 = mass_rho / masses, mass_ie / masses

    if not np.any(u):
        return state.copy(), RemapDiagnostics(
            n_pseudo_steps=0,
            mass_before=before.mass,
            mass_after=before.mass,
            internal_before=before.internal,
            internal_after=before.internal,
            kinetic_before=before.kinetic,
            kinetic_after=before.kinetic,
            extrema=[_extrema("density", rho0, rho0), _extrema("energy", eps0, eps0)],
        )

    check_remap_path(hydro, state.x, x_target)
    mesh = hydro.mesh_at(state.x)
    steps = config.n_pseudo_steps or required_pseudo_steps(mesh, u, config.pseudo_cfl)
    fq = face_quadrature(mesh, hydro.q1d)
    for attempt in range(MAX_STEP_DOUBLINGS + 1):
        run = _RemapRun(hydro=hydro, config=config, mesh=mesh, u=u, fq=fq, limited=[])
        try:
            v, masses_new, (cons_rho, cons_ie) = run.run(steps, state.v, masses, [mass_rho, mass_ie])
            break
        except AdmissibleStepError as exc:
            if config.n_pseudo_steps is not None or attempt == MAX_STEP_DOUBLINGS:
                raise
            logger.info(f"remap pseudo-step too large ({exc}); retrying with {2 * steps} steps")
            steps *= 2

    rho, eps = cons_rho / masses_new, cons_ie / masses_new

    # nodal densities on the target's own lumped volumes; each DOF keeps its conserved mass
    volumes = lumped_volumes(hydro, x_target)
    volume_mismatch = float(np.max(np.abs(masses_new - volumes) / volumes))
    geom_new = hydro.geometry(x_target)
    rho_raw = run.density_at_points(cons_rho / volumes)
    rho_q = np.maximum(rho_raw, DENSITY_FLOOR * float(rho.max()))
    floor_mass = float(np.sum(weights * (rho_q - rho_raw) * geom_new.detJ))
    qdata0 = rho_q * geom_new.detJ
    # specific energy whose density-weighted nodal integrals equal the conserved products
    weighted_mass = _nodal_integrals(hydro, weights * qdata0)
    e_nodes = np.divide(eps, rho, out=np.zeros_like(eps), where=rho > 0)
    np.divide(cons_ie, weighted_mass, out=e_nodes, where=weighted_mass > 0)

    new_state = HydroState(x=x_target, v=v, e=e_nodes, qdata0=qdata0, t=state.t)
    after = hydro.energies(new_state)
    diagnostics = RemapDiagnostics(
        n_pseudo_steps=steps,
        mass_before=before.mass,
        mass_after=after.mass,
        internal_before=before.internal,
        internal_after=after.internal,
        kinetic_before=before.kinetic,
        kinetic_after=after.kinetic,
        extrema=[_extrema("density", rho0, rho), _extrema("energy", eps0, eps)],
        limiter_activity=float(np.mean(run.limited)) if run.limited else 0.0,
        volume_mismatch=volume_mismatch,
        floor_mass=floor_mass,
    )
    if volume_mismatch > 1e-10 or floor_mass > 0:
        logger.warning(
            f"remap: transported volumes differ from the target mesh by {volume_mismatch:.3e}, "
            f"density floor added mass {floor_mass:.3e}"
        )
    logger.info(
        f"remap: {steps} pseudo-steps, mass {before.mass:.12e} -> {after.mass:.12e}, "
        f"kinetic {before.kinetic:.6e} -> {after.kinetic:.6e}"
    )
    return new_state, diagnostics

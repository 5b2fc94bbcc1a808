"""Partial-assembly operators, the full-assembly oracle and PCG.

Every operator stores only quadrature-point data and applies
``G^T B^T D B G`` with sum-factorized ``B``. ``element_matrices`` builds the
dense element blocks from explicit Kronecker products; it backs the
assembled oracle and is never used on the apply path.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ale_minihydro.exceptions import (
    CgNotConvergedError,
    DimensionMismatchError,
    NumericalError,
    SizeGuardError,
)
from ale_minihydro.kernel_exec import ExecPlace, for_each_batch
from ale_minihydro.memory_pool import MemoryManager, get_memory_manager
from ale_minihydro.mesh_fespace import FiniteElementSpace, GeometricFactors, gather, scatter_add
from ale_minihydro.settings import FULL_ASSEMBLY_MAX_DOFS
from ale_minihydro.tensor_basis import (
    Basis1D,
    add_flops,
    apply_factors,
    interp,
    interp_grad,
    interp_grad_t,
    interp_t,
    kron_grad,
    kron_interp,
)

logger = logging.getLogger(__name__)


class CgBreakdownError(NumericalError):
    def __init__(self, iteration: int, curvature: float) -> None:
        super().__init__(f"CG breakdown at iteration {iteration}: p^T A p = {curvature:.3e}")
        self.iteration = iteration
        self.curvature = curvature


def _check_size(what: str, expected: int, x: np.ndarray) -> None:
    if x.size != expected:
        raise DimensionMismatchError(what, expected, x.size)


@dataclass
class ElementwiseOperator:
    """Shared apply plumbing: gather, batched element kernel, scatter"""

    place: ExecPlace = field(default_factory=ExecPlace.sequential, kw_only=True)
    memory: MemoryManager = field(default_factory=get_memory_manager, kw_only=True)

    def _run(
        self,
        space_in: FiniteElementSpace,
        space_out: FiniteElementSpace,
        x: np.ndarray,
        kernel: Callable[[np.ndarray, slice], np.ndarray],
    ) -> np.ndarray:
        _check_size("input vector", space_in.vsize, x)
        xe = gather(space_in, x)
        with self.memory.temporary(space_out.element_shape) as ye:

            def body(batch: slice) -> None:
                ye[:, batch] = kernel(xe[:, batch], batch)

            for_each_batch(self.place, space_in.ne, body)
            return scatter_add(space_out, ye)


@dataclass
class MassPA(ElementwiseOperator):
    space: FiniteElementSpace
    basis: Basis1D
    qdata: np.ndarray

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def height(self) -> int:
        return self.space.vsize

    @property
    def width(self) -> int:
        return self.space.vsize

    @property
    def stored_values(self) -> int:
        return self.qdata.size

    def _kernel(self, ue: np.ndarray, batch: slice) -> np.ndarray:
        uq = interp(self.basis, ue, self.dim) * self.qdata[batch]
        add_flops(uq.size)
        return interp_t(self.basis, uq, self.dim)

    def mult(self, x: np.ndarray) -> np.ndarray:
        return self._run(self.space, self.space, x, self._kernel)

    def diagonal(self) -> np.ndarray:
        sq = (self.basis.B**2).T
        de = apply_factors(self.qdata, [sq] * self.dim)
        return scatter_add(self.space, np.broadcast_to(de, self.space.element_shape))

    def element_matrices(self) -> np.ndarray:
        Bk = kron_interp(self.basis, self.dim)
        q = self.qdata.reshape(self.space.ne, -1)
        return np.einsum("qi,eq,qj->eij", Bk, q, Bk)


def mass_setup(
    space: FiniteElementSpace,
    basis: Basis1D,
    geom: GeometricFactors,
    coefficient: float | np.ndarray = 1.0,
    **kwargs,
) -> MassPA:
    qdata = np.asarray(coefficient) * geom.wdetJ
    add_flops(2 * qdata.size)
    return MassPA(space=space, basis=basis, qdata=np.ascontiguousarray(qdata), **kwargs)


def _grad_pair_factors(basis: Basis1D, dim: int, b: int, c: int) -> list[np.ndarray]:
    """Per-direction factors of d_b(phi_i) d_c(phi_i) for the diagonal contraction"""
    factors = []
    for k in range(dim):
        left = basis.G if k == b else basis.B
        right = basis.G if k == c else basis.B
        factors.append((left * right).T)
    return factors


@dataclass
class DiffusionPA(ElementwiseOperator):
    space: FiniteElementSpace
    basis: Basis1D
    qdata: np.ndarray

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def height(self) -> int:
        return self.space.vsize

    @property
    def width(self) -> int:
        return self.space.vsize

    @property
    def stored_values(self) -> int:
        return self.qdata.size

    def _kernel(self, ue: np.ndarray, batch: slice) -> np.ndarray:
        g = interp_grad(self.basis, ue, self.dim)
        flux = np.einsum("...bc,...c->...b", self.qdata[batch], g)
        add_flops(flux.size * self.dim)
        return interp_grad_t(self.basis, flux, self.dim)

    def mult(self, x: np.ndarray) -> np.ndarray:
        return self._run(self.space, self.space, x, self._kernel)

    def diagonal(self) -> np.ndarray:
        de = 0.0
        for b in range(self.dim):
            for c in range(self.dim):
                de = de + apply_factors(self.qdata[..., b, c], _grad_pair_factors(self.basis, self.dim, b, c))
        return scatter_add(self.space, np.broadcast_to(de, self.space.element_shape))

    def element_matrices(self) -> np.ndarray:
        grads = [kron_grad(self.basis, self.dim, b) for b in range(self.dim)]
        q = self.qdata.reshape(self.space.ne, -1, self.dim, self.dim)
        out = 0.0
        for b in range(self.dim):
            for c in range(self.dim):
                out = out + np.einsum("qi,eq,qj->eij", grads[b], q[..., b, c], grads[c])
        return out


def diffusion_setup(
    space: FiniteElementSpace,
    basis: Basis1D,
    geom: GeometricFactors,
    coefficient: float | np.ndarray = 1.0,
    **kwargs,
) -> DiffusionPA:
    scale = np.asarray(coefficient) * geom.wdetJ
    qdata = scale[..., None, None] * np.einsum("...ik,...jk->...ij", geom.Jinv, geom.Jinv)
    d = space.dim
    add_flops(scale.size * (d**3 + d * d + 1))
    return DiffusionPA(space=space, basis=basis, qdata=qdata, **kwargs)


@dataclass
class ForcePA(ElementwiseOperator):
    """Rectangular force operator mapping thermodynamic (L2) to kinematic (H1 vector) space.

    ``qdata[..., a, c]`` is ``w detJ (sigma J^{-T})_{ac}``.
    """

    kinematic: FiniteElementSpace
    thermo: FiniteElementSpace
    basis_k: Basis1D
    basis_t: Basis1D
    qdata: np.ndarray

    @property
    def dim(self) -> int:
        return self.kinematic.dim

    @property
    def height(self) -> int:
        return self.kinematic.vsize

    @property
    def width(self) -> int:
        return self.thermo.vsize

    @property
    def stored_values(self) -> int:
        return self.qdata.size

    def _kernel(self, ee: np.ndarray, batch: slice) -> np.ndarray:
        eq = interp(self.basis_t, ee[0], self.dim)
        gq = np.moveaxis(self.qdata[batch] * eq[..., None, None], -2, 0)
        return interp_grad_t(self.basis_k, gq, self.dim)

    def _kernel_t(self, ve: np.ndarray, batch: slice) -> np.ndarray:
        g = interp_grad(self.basis_k, ve, self.dim)
        s = np.einsum("...ac,a...c->...", self.qdata[batch], g)
        return interp_t(self.basis_t, s, self.dim)[None]

    def mult(self, e: np.ndarray) -> np.ndarray:
        return self._run(self.thermo, self.kinematic, e, self._kernel)

    def mult_transpose(self, v: np.ndarray) -> np.ndarray:
        return self._run(self.kinematic, self.thermo, v, self._kernel_t)

    def element_matrices(self) -> np.ndarray:
        """(NE, d * Dk^d, Dt^d) element blocks, rows component-major"""
        Bt = kron_interp(self.basis_t, self.dim)
        grads = [kron_grad(self.basis_k, self.dim, c) for c in range(self.dim)]
        q = self.qdata.reshape(self.kinematic.ne, -1, self.dim, self.dim)
        blocks = [
            sum(np.einsum("qi,eq,qj->eij", grads[c], q[..., a, c], Bt) for c in range(self.dim))
            for a in range(self.dim)
        ]
        return np.concatenate(blocks, axis=1)


def force_setup(
    kinematic: FiniteElementSpace,
    thermo: FiniteElementSpace,
    basis_k: Basis1D,
    basis_t: Basis1D,
    geom: GeometricFactors,
    stress: np.ndarray,
    **kwargs,
) -> ForcePA:
    qdata = geom.wdetJ[..., None, None] * np.einsum("...ab,...cb->...ac", stress, geom.Jinv)
    return ForcePA(
        kinematic=kinematic, thermo=thermo, basis_k=basis_k, basis_t=basis_t, qdata=qdata, **kwargs
    )


def force_apply(op: ForcePA, e: np.ndarray) -> np.ndarray:
    return op.mult(e)


def force_apply_transpose(op: ForcePA, v: np.ndarray) -> np.ndarray:
    return op.mult_transpose(v)


@dataclass
class ConvectionPA(ElementwiseOperator):
    """``K_ij = int phi_i (u . grad phi_j)``, optionally weighted by a point coefficient.

    ``qdata[..., b]`` is ``coeff w (adj(J) u)_b``.
    """

    space: FiniteElementSpace
    basis: Basis1D
    qdata: np.ndarray

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def height(self) -> int:
        return self.space.vsize

    @property
    def width(self) -> int:
        return self.space.vsize

    def _kernel(self, ue: np.ndarray, batch: slice) -> np.ndarray:
        g = interp_grad(self.basis, ue, self.dim)
        s = np.einsum("...b,...b->...", self.qdata[batch], g)
        return interp_t(self.basis, s, self.dim)

    def mult(self, x: np.ndarray) -> np.ndarray:
        return self._run(self.space, self.space, x, self._kernel)

    def element_matrices(self) -> np.ndarray:
        Bk = kron_interp(self.basis, self.dim)
        q = self.qdata.reshape(self.space.ne, -1, self.dim)
        return sum(
            np.einsum("qi,eq,qj->eij", Bk, q[..., b], kron_grad(self.basis, self.dim, b))
            for b in range(self.dim)
        )


def convection_setup(
    space: FiniteElementSpace,
    basis: Basis1D,
    geom: GeometricFactors,
    velocity_q: np.ndarray,
    coefficient: float | np.ndarray = 1.0,
    **kwargs,
) -> ConvectionPA:
    """``velocity_q`` is the physical velocity at the points, shape (NE, Q^d, d)"""
    adj_u = np.einsum("...bc,...c->...b", geom.Jinv, velocity_q) * geom.detJ[..., None]
    qdata = (np.asarray(coefficient) * geom.weights)[..., None] * adj_u
    return ConvectionPA(space=space, basis=basis, qdata=qdata, **kwargs)


@dataclass
class ConstrainedOperator:
    """Square operator with essential rows and columns replaced by the identity"""

    op: MassPA | DiffusionPA
    essential: np.ndarray

    @property
    def height(self) -> int:
        return self.op.height

    def mult(self, x: np.ndarray) -> np.ndarray:
        x0 = np.array(x, dtype=np.float64)
        x0[self.essential] = 0.0
        y = self.op.mult(x0)
        y[self.essential] = x[self.essential]
        return y

    def diagonal(self) -> np.ndarray:
        diag = self.op.diagonal()
        diag[self.essential] = 1.0
        return diag

    def eliminate_rhs(self, b: np.ndarray, values: np.ndarray | None = None) -> np.ndarray:
        """Right-hand side for prescribed essential values (zero by default)"""
        rhs = np.array(b, dtype=np.float64)
        if values is None:
            rhs[self.essential] = 0.0
            return rhs
        xb = np.zeros_like(rhs)
        xb[self.essential] = values
        rhs -= self.op.mult(xb)
        rhs[self.essential] = values
        return rhs


@dataclass(frozen=True)
class AssembledMatrix:
    matrix: sp.csr_array
    # dense element-block entries before global merging
    element_entries: int

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def mult(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def asymmetry(self) -> float:
        diff = self.matrix - self.matrix.T
        return float(abs(diff).max()) if diff.nnz else 0.0


def _vector_index(space: FiniteElementSpace) -> np.ndarray:
    """(NE, vdim * nloc) global vector indices, component-major within the element"""
    comps = [c * space.ndofs + space.dof_map for c in range(space.vdim)]
    return np.concatenate(comps, axis=1)


def assemble_blocks(blocks: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape) -> sp.csr_array:
    r = np.repeat(rows[:, :, None], cols.shape[1], axis=2)
    c = np.repeat(cols[:, None, :], rows.shape[1], axis=1)
    coo = sp.coo_array((blocks.ravel(), (r.ravel(), c.ravel())), shape=shape)
    return coo.tocsr()


def full_assemble(op, max_dofs: int = FULL_ASSEMBLY_MAX_DOFS) -> AssembledMatrix:
    """Sparse global matrix of a PA operator (correctness oracle, desk-scale only)"""
    size = max(op.height, op.width)
    if size > max_dofs:
        raise SizeGuardError(size, max_dofs)
    blocks = op.element_matrices()
    if isinstance(op, ForcePA):
        rows, cols = _vector_index(op.kinematic), op.thermo.dof_map
        matrix = assemble_blocks(blocks, rows, cols, (op.height, op.width))
        return AssembledMatrix(matrix, int(blocks.size))
    space = op.space
    scalar = assemble_blocks(blocks, space.dof_map, space.dof_map, (space.ndofs, space.ndofs))
    matrix = sp.block_diag([scalar] * space.vdim, format="csr") if space.vdim > 1 else scalar
    logger.debug(f"assembled {type(op).__name__}: {matrix.shape[0]} rows, {matrix.nnz} nonzeros")
    return AssembledMatrix(sp.csr_array(matrix), int(blocks.size) * space.vdim)


def dump_matrix(matrix: AssembledMatrix, path: str | Path) -> None:
    """Coordinate text format, one ``row col value`` triple per line"""
    coo = matrix.matrix.tocoo()
    lines = [f"{r} {c} {float(v)!r}" for r, c, v in zip(coo.row, coo.col, coo.data, strict=True)]
    Path(path).write_text("\n".join(lines) + "\n")


def cg_solve(
    apply: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    precond: np.ndarray | None = None,
    rel_tol: float = 1e-12,
    max_iter: int = 1000,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG for an SPD operator; stops on ``|b - Ax| <= rel_tol |b|``"""
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x) if x0 is not None else b.copy()
    tol = rel_tol * b_norm
    history = [float(np.linalg.norm(r))]
    if history[0] <= tol:
        return x, 0
    inv_diag = None if precond is None else 1.0 / precond
    z = r if inv_diag is None else inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iter + 1):
        ap = apply(p)
        curvature = float(p @ ap)
        if curvature <= 0.0:
            raise CgBreakdownError(it, curvature)
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * ap
        history.append(float(np.linalg.norm(r)))
        if history[-1] <= tol:
            logger.debug(f"CG converged in {it} iterations, residual {history[-1]:.3e}")
            return x, it
        z = r if inv_diag is None else inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CgNotConvergedError(max_iter, history)

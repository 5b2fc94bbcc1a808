"""Target-matrix mesh optimization.

The objective integrates a quality metric of ``T = A W^{-1}`` (physical
Jacobian times inverse target Jacobian) over the target elements and adds a
limiting term that keeps nodes near their initial positions:

    F(x) = sum_q w_q det(W_q) mu(T_q) + gamma * delta^T M_0 delta,
    delta = (x - x0) / d(x0)

Gradient, Hessian action and the Hessian diagonal are all matrix-free; the
point data of the Hessian is recomputed on every call.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from ale_minihydro.exceptions import (
    CgNotConvergedError,
    ConfigError,
    InvertedElementError,
    PseudoCflError,
)
from ale_minihydro.mesh_fespace import (
    HighOrderMesh,
    compute_geometric_factors,
    element_jacobians,
    element_volumes,
    first_nonpositive,
    gather,
    min_det_jacobian,
    node_length_scale,
    perturb_interior,
    quadrature_weights,
    scatter_add,
)
from ale_minihydro.models import TmopControls, TmopSummary
from ale_minihydro.pa_operators import (
    CgBreakdownError,
    ElementwiseOperator,
    MassPA,
    cg_solve,
    mass_setup,
)
from ale_minihydro.parameters import TargetMode
from ale_minihydro.remap_fct import cg_advection_step, required_pseudo_steps
from ale_minihydro.tensor_basis import (
    Basis1D,
    apply_factors,
    interp,
    interp_grad,
    interp_grad_t,
    lobatto_basis,
)

logger = logging.getLogger(__name__)

REFERENCE_PERTURBATION = 0.1


def _cofactor_derivative(tau: np.ndarray, M: np.ndarray) -> np.ndarray:
    """d cof(T)_ij / d T_kl = tau (M_ij M_kl - M_il M_kj), with M = T^{-T}"""
    return tau[..., None, None, None, None] * (
        np.einsum("...ij,...kl->...ijkl", M, M) - np.einsum("...il,...kj->...ijkl", M, M)
    )


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...kl->...ijkl", a, b)


def _pointwise(a: np.ndarray) -> np.ndarray:
    return a[..., None, None, None, None]


def _identity4(dim: int) -> np.ndarray:
    eye = np.eye(dim)
    return np.einsum("ik,jl->ijkl", eye, eye)


class QualityMetric:
    """mu(T) with analytic first and second derivatives"""

    def evaluate(self, T: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def first(self, T: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def second(self, T: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ShapeMetric2D(QualityMetric):
    """|T|^2 / (2 det T) - 1"""

    def evaluate(self, T):
        # |T|^2 - 2 det T as a sum of squares, exact near the ideal shape
        gap = (T[..., 0, 0] - T[..., 1, 1]) ** 2 + (T[..., 0, 1] + T[..., 1, 0]) ** 2
        return gap / (2.0 * np.linalg.det(T))

    def first(self, T):
        tau = np.linalg.det(T)
        C = tau[..., None, None] * np.swapaxes(np.linalg.inv(T), -1, -2)
        norm2 = np.sum(T * T, axis=(-2, -1))
        return T / tau[..., None, None] - (norm2 / (2 * tau * tau))[..., None, None] * C

    def second(self, T):
        tau = np.linalg.det(T)
        M = np.swapaxes(np.linalg.inv(T), -1, -2)
        C = tau[..., None, None] * M
        norm2 = np.sum(T * T, axis=(-2, -1))
        return (
            _identity4(2) / _pointwise(tau)
            - (_outer(T, C) + _outer(C, T)) / _pointwise(tau**2)
            + _pointwise(norm2 / tau**3) * _outer(C, C)
            - _pointwise(norm2 / (2 * tau**2)) * _cofactor_derivative(tau, M)
        )


class ShapeMetric3D(QualityMetric):
    """|T|^2 |T^{-1}|^2 / 9 - 1"""

    def evaluate(self, T):
        Tinv = np.linalg.inv(T)
        return np.sum(T * T, axis=(-2, -1)) * np.sum(Tinv * Tinv, axis=(-2, -1)) / 9.0 - 1.0

    def _parts(self, T):
        M = np.swapaxes(np.linalg.inv(T), -1, -2)
        a = np.sum(T * T, axis=(-2, -1))
        b = np.sum(M * M, axis=(-2, -1))
        MMtM = M @ np.swapaxes(M, -1, -2) @ M
        return M, a, b, MMtM

    def first(self, T):
        _, a, b, MMtM = self._parts(T)
        return (2.0 * b[..., None, None] * T - 2.0 * a[..., None, None] * MMtM) / 9.0

    def second(self, T):
        M, a, b, MMtM = self._parts(T)
        Mt = np.swapaxes(M, -1, -2)
        da, db = 2.0 * T, -2.0 * MMtM
        d2b = 2.0 * (
            np.einsum("...il,...kj->...ijkl", M, MMtM)
            + np.einsum("...ik,...lj->...ijkl", M @ Mt, Mt @ M)
            + np.einsum("...il,...kj->...ijkl", MMtM, M)
        )
        cross = _outer(da, db) + _outer(db, da)
        return (cross + 2.0 * _pointwise(b) * _identity4(3) + _pointwise(a) * d2b) / 9.0


class ShapeSizeMetric(QualityMetric):
    """Shape metric plus the size term (tau - 1)^2 / tau, tau = det T"""

    def __init__(self, shape: QualityMetric) -> None:
        self.shape = shape

    def evaluate(self, T):
        tau = np.linalg.det(T)
        return self.shape.evaluate(T) + tau + 1.0 / tau - 2.0

    def first(self, T):
        tau = np.linalg.det(T)
        C = tau[..., None, None] * np.swapaxes(np.linalg.inv(T), -1, -2)
        return self.shape.first(T) + (1.0 - 1.0 / tau**2)[..., None, None] * C

    def second(self, T):
        tau = np.linalg.det(T)
        M = np.swapaxes(np.linalg.inv(T), -1, -2)
        C = tau[..., None, None] * M
        g1 = (1.0 - 1.0 / tau**2)[..., None, None, None, None]
        g2 = (2.0 / tau**3)[..., None, None, None, None]
        return self.shape.second(T) + g2 * _outer(C, C) + g1 * _cofactor_derivative(tau, M)


def shape_metric(dim: int) -> QualityMetric:
    return ShapeMetric2D() if dim == 2 else ShapeMetric3D()


@dataclass(frozen=True)
class TargetTransform:
    W: np.ndarray
    Winv: np.ndarray
    detW: np.ndarray

    @classmethod
    def from_matrices(cls, W: np.ndarray) -> "TargetTransform":
        detW = np.linalg.det(W)
        if np.any(detW <= 0):
            raise ConfigError("target matrices must have positive determinant")
        return cls(W=W, Winv=np.linalg.inv(W), detW=detW)


@dataclass(frozen=True)
class AdaptivityField:
    """Nodal (H1 scalar) target-size field on the mesh"""

    values: np.ndarray

    def at_points(self, mesh: HighOrderMesh, basis: Basis1D) -> np.ndarray:
        return interp(basis, gather(mesh.h1, self.values)[0], mesh.dim)


def build_targets(
    mesh0: HighOrderMesh,
    mode: TargetMode = TargetMode.IDEAL_UNIFORM,
    xi: AdaptivityField | None = None,
    q1d: int | None = None,
) -> TargetTransform:
    """Ideal-uniform targets are scaled identities with each element's volume.

    Size-adapted targets use the mean element volume scaled by ``xi``:
    ``W = (vbar xi)^{1/d} / 2 I``.
    """
    dim = mesh0.dim
    basis = lobatto_basis(mesh0.order, q1d or mesh0.order + 2)
    volumes = element_volumes(mesh0, basis.quad)
    point_shape = (mesh0.ne,) + (basis.q1d,) * dim
    if TargetMode(mode) == TargetMode.IDEAL_UNIFORM:
        size = np.broadcast_to(volumes.reshape((-1,) + (1,) * dim), point_shape)
    else:
        if xi is None:
            raise ConfigError("size-adapted targets need an adaptivity field")
        xi_q = xi.at_points(mesh0, basis)
        if np.any(xi_q <= 0):
            raise ConfigError("adaptivity field must be positive")
        size = volumes.mean() * xi_q
    scale = 0.5 * size ** (1.0 / dim)
    return TargetTransform.from_matrices(scale[..., None, None] * np.eye(dim))


@dataclass
class TMOPObjective(ElementwiseOperator):
    mesh0: HighOrderMesh
    basis: Basis1D
    metric: QualityMetric
    targets: TargetTransform
    limit_mass: MassPA
    distance: np.ndarray
    gamma: float = 0.0
    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def dim(self) -> int:
        return self.mesh0.dim

    @property
    def x0(self) -> np.ndarray:
        return self.mesh0.x.reshape(-1)

    @property
    def space(self):
        return self.mesh0.coordinate_space()

    @property
    def _weights(self) -> np.ndarray:
        return quadrature_weights(self.basis.quad, self.dim) * self.targets.detW

    def _jacobians(self, x: np.ndarray) -> np.ndarray:
        return element_jacobians(self.mesh0.with_coords(x), self.basis)

    def _scaled_delta(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.x0).reshape(self.dim, -1) / self.distance).reshape(-1)

    def shape_term(self, x: np.ndarray) -> float:
        A = self._jacobians(x)
        if np.any(np.linalg.det(A) <= 0):
            return np.inf
        T = A @ self.targets.Winv
        return float(np.sum(self._weights * self.metric.evaluate(T)))

    def limiting_term(self, x: np.ndarray) -> float:
        delta = self._scaled_delta(x)
        return float(delta @ self.limit_mass.mult(delta))

    def _check_valid(self, A: np.ndarray) -> None:
        if (bad := first_nonpositive(np.linalg.det(A))) is not None:
            raise InvertedElementError(*bad)

    def _limit_hessian(self, dx: np.ndarray) -> np.ndarray:
        scaled = (dx.reshape(self.dim, -1) / self.distance).reshape(-1)
        out = self.limit_mass.mult(scaled)
        return 2.0 * self.gamma * (out.reshape(self.dim, -1) / self.distance).reshape(-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        A = self._jacobians(x)
        self._check_valid(A)
        Winv = self.targets.Winv
        P = self.metric.first(A @ Winv)
        Q = self._weights[..., None, None] * (P @ np.swapaxes(Winv, -1, -2))
        ge = interp_grad_t(self.basis, np.moveaxis(Q, -2, 0), self.dim)
        grad = scatter_add(self.space, ge)
        if self.gamma:
            grad += self._limit_hessian(x - self.x0)
        return grad

    def _point_hessian(self, x: np.ndarray) -> np.ndarray:
        A = self._jacobians(x)
        self._check_valid(A)
        return self.metric.second(A @ self.targets.Winv)

    def hessian_action(self, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
        H = self._point_hessian(x)
        Winv = self.targets.Winv
        WinvT = np.swapaxes(Winv, -1, -2)
        weights = self._weights

        def kernel(dxe: np.ndarray, batch: slice) -> np.ndarray:
            dA = np.moveaxis(interp_grad(self.basis, dxe, self.dim), 0, -2)
            dT = dA @ Winv[batch]
            dP = np.einsum("...ijkl,...kl->...ij", H[batch], dT)
            Q = weights[batch][..., None, None] * (dP @ WinvT[batch])
            return interp_grad_t(self.basis, np.moveaxis(Q, -2, 0), self.dim)

        out = self._run(self.space, self.space, dx, kernel)
        if self.gamma:
            out += self._limit_hessian(dx)
        return out

    def hessian_diagonal(self, x: np.ndarray) -> np.ndarray:
        H = self._point_hessian(x)
        Winv = self.targets.Winv
        dim, basis = self.dim, self.basis
        de = np.zeros(self.space.element_shape)
        for a in range(dim):
            Ha = H[..., a, :, a, :]
            K = self._weights[..., None, None] * (Winv @ Ha @ np.swapaxes(Winv, -1, -2))
            for c in range(dim):
                for c2 in range(dim):
                    factors = [
                        ((basis.G if k == c else basis.B) * (basis.G if k == c2 else basis.B)).T
                        for k in range(dim)
                    ]
                    de[a] += apply_factors(K[..., c, c2], factors)
        diag = scatter_add(self.space, de)
        if self.gamma:
            lumped = self.limit_mass.diagonal().reshape(dim, -1)
            diag += 2.0 * self.gamma * (lumped / self.distance**2).reshape(-1)
        return diag


def make_objective(
    mesh0: HighOrderMesh,
    targets: TargetTransform,
    metric: QualityMetric | None = None,
    gamma: float | None = None,
    q1d: int | None = None,
    fix_boundary: bool = True,
    **kwargs,
) -> TMOPObjective:
    """Objective on the initial mesh; ``gamma=None`` balances the two terms automatically"""
    basis = lobatto_basis(mesh0.order, q1d or mesh0.order + 2)
    geom0 = compute_geometric_factors(mesh0, basis.quad)
    limit_mass = mass_setup(mesh0.coordinate_space(), basis, geom0, **kwargs)
    obj = TMOPObjective(
        mesh0=mesh0,
        basis=basis,
        metric=metric or shape_metric(mesh0.dim),
        targets=targets,
        limit_mass=limit_mass,
        distance=node_length_scale(mesh0),
        fixed=mesh0.boundary_vdofs() if fix_boundary else np.zeros(0, dtype=np.int64),
        **kwargs,
    )
    obj.gamma = limiting_weight(obj) if gamma is None else gamma
    return obj


def limiting_weight(obj: TMOPObjective, seed: int = 0) -> float:
    """gamma making both terms equal under a reference perturbation of the initial mesh"""
    perturbed = perturb_interior(obj.mesh0, REFERENCE_PERTURBATION, seed).x.reshape(-1)
    shape, limit = obj.shape_term(perturbed), obj.limiting_term(perturbed)
    if not np.isfinite(shape) or shape <= 0 or limit <= 0:
        return 1.0
    gamma = shape / limit
    logger.debug(f"limiting weight gamma = {gamma:.6e}")
    return gamma


def objective(obj: TMOPObjective, x: np.ndarray) -> float:
    shape = obj.shape_term(x)
    if not np.isfinite(shape):
        return np.inf
    return shape + obj.gamma * obj.limiting_term(x)


def gradient(obj: TMOPObjective, x: np.ndarray) -> np.ndarray:
    return obj.gradient(x)


def hessian_action(obj: TMOPObjective, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
    return obj.hessian_action(x, dx)


def hessian_diagonal(obj: TMOPObjective, x: np.ndarray) -> np.ndarray:
    return obj.hessian_diagonal(x)


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    converged: bool
    objective_history: list[float]
    grad_norms: list[float]


def _free(v: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=np.float64)
    v[fixed] = 0.0
    return v


def _newton_direction(obj: TMOPObjective, x: np.ndarray, g: np.ndarray, controls: TmopControls):
    fixed = obj.fixed
    diag = obj.hessian_diagonal(x)
    diag[fixed] = 1.0
    floor = 1e-12 * max(float(np.max(np.abs(diag))), 1.0)
    diag = np.where(diag > 0, diag, np.maximum(np.abs(diag), floor))

    def apply(dx: np.ndarray) -> np.ndarray:
        out = _free(obj.hessian_action(x, _free(dx, fixed)), fixed)
        out[fixed] = dx[fixed]
        return out

    try:
        dx, _ = cg_solve(apply, -g, precond=diag, rel_tol=controls.cg_rel_tol, max_iter=controls.cg_max_iter)
    except (CgBreakdownError, CgNotConvergedError) as exc:
        logger.debug(f"Newton inner solve fell back to descent: {exc}")
        dx = -g / diag
    if g @ dx >= 0:
        dx = -g / diag
    return dx


def newton_solve(
    obj: TMOPObjective, x_init: np.ndarray, controls: TmopControls | None = None
) -> NewtonResult:
    """Minimize F with fixed boundary nodes by line-searched, Jacobi-preconditioned Newton-CG"""
    controls = controls or TmopControls()
    x = np.array(x_init, dtype=np.float64)
    f = objective(obj, x)
    g = _free(obj.gradient(x), obj.fixed)
    g0 = float(np.linalg.norm(g))
    history, norms = [f], [g0]
    tol = max(controls.newton_rel_tol * g0, controls.newton_abs_tol)
    if g0 <= controls.newton_abs_tol:
        return NewtonResult(x, 0, True, history, norms)

    for it in range(1, controls.max_newton + 1):
        dx = _newton_direction(obj, x, g, controls)
        step, accepted = 1.0, False
        for _ in range(controls.max_backtracks):
            x_new = x + step * dx
            f_new = objective(obj, x_new)
            if np.isfinite(f_new) and f_new < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            logger.warning(f"TMOP line search failed at Newton iteration {it}; keeping best iterate")
            return NewtonResult(x, it - 1, False, history, norms)
        x, f = x_new, f_new
        g = _free(obj.gradient(x), obj.fixed)
        history.append(f)
        norms.append(float(np.linalg.norm(g)))
        logger.debug(f"Newton {it}: F={f:.6e} |g|={norms[-1]:.3e} step={step:g}")
        if norms[-1] <= tol:
            return NewtonResult(x, it, True, history, norms)
    logger.warning(f"TMOP Newton did not converge in {controls.max_newton} iterations")
    return NewtonResult(x, controls.max_newton, False, history, norms)


def summarize(obj: TMOPObjective, x_init: np.ndarray, result: NewtonResult) -> TmopSummary:
    quad = obj.basis.quad
    return TmopSummary(
        iterations=result.iterations,
        converged=result.converged,
        f_before=result.objective_history[0],
        f_after=result.objective_history[-1],
        min_det_before=min_det_jacobian(obj.mesh0.with_coords(x_init), quad),
        min_det_after=min_det_jacobian(obj.mesh0.with_coords(result.x), quad),
    )


def advect_adaptivity(
    xi: AdaptivityField,
    mesh: HighOrderMesh,
    displacement: np.ndarray,
    n_pseudo_steps: int | None = None,
    pseudo_cfl: float = 0.25,
    **kwargs,
) -> AdaptivityField:
    """Transport a nodal field from ``mesh`` to ``mesh + displacement``.

    Solves ``M dxi/dtau = K xi`` (``K`` the convection operator with the mesh
    velocity) with the remap's matrix-free CG stepping.
    """
    values = np.array(xi.values, dtype=np.float64)
    if not np.any(displacement):
        return AdaptivityField(values)
    required = required_pseudo_steps(mesh, displacement, pseudo_cfl)
    steps = n_pseudo_steps or required
    if steps < required:
        raise PseudoCflError(steps, required)
    dtau = 1.0 / steps
    for n in range(steps):
        values = cg_advection_step(mesh, mesh.h1, values, displacement, dtau, tau=n * dtau, **kwargs)
    return AdaptivityField(values)

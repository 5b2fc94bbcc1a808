"""Single-material Lagrangian phase.

Kinematic fields (positions, velocity) live in the H1 vector space of the
mesh, specific internal energy in an L2 space. Mass is carried per
quadrature point as ``rho0 * detJ0`` so density at any later time is
``qdata0 / detJ`` and the mass matrices of a phase never change.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from ale_minihydro.exceptions import InvertedElementError, TimestepTooSmallError
from ale_minihydro.kernel_exec import ExecPlace
from ale_minihydro.memory_pool import MemoryManager, get_memory_manager
from ale_minihydro.mesh_fespace import (
    FiniteElementSpace,
    GeometricFactors,
    HighOrderMesh,
    compute_geometric_factors,
    gather,
    l2_space,
    quadrature_weights,
)
from ale_minihydro.models import EnergyReport, MaterialModel, StepControls, ViscosityModel
from ale_minihydro.pa_operators import ConstrainedOperator, ForcePA, MassPA, cg_solve, force_setup
from ale_minihydro.tensor_basis import interp, interp_grad, lobatto_basis

logger = logging.getLogger(__name__)

MAX_STEP_RETRIES = 5


@dataclass
class HydroState:
    """Positions and velocity (H1, component-major), energy (L2) and initial mass weights"""

    x: np.ndarray
    v: np.ndarray
    e: np.ndarray
    qdata0: np.ndarray
    t: float = 0.0

    def copy(self) -> "HydroState":
        return HydroState(self.x.copy(), self.v.copy(), self.e.copy(), self.qdata0.copy(), self.t)


@dataclass
class StressData:
    stress: np.ndarray
    wave_speed: np.ndarray
    length: np.ndarray
    density: np.ndarray
    clamped: int = 0


def length_scale(detJ: np.ndarray, dim: int, order: int) -> np.ndarray:
    """Nodal spacing: element width (twice the reference half-width) over the order"""
    return 2.0 * np.cbrt(detJ) / order if dim == 3 else 2.0 * np.sqrt(detJ) / order


class LagrangianHydro:
    """Semi-discrete Lagrangian hydro operator with an RK2-average integrator"""

    def __init__(
        self,
        mesh: HighOrderMesh,
        q1d: int | None = None,
        thermo_order: int | None = None,
        material: MaterialModel | None = None,
        viscosity: ViscosityModel | None = None,
        steps: StepControls | None = None,
        place: ExecPlace | None = None,
        memory: MemoryManager | None = None,
        cg_rel_tol: float = 1e-12,
        cg_max_iter: int = 1000,
        wall_bc: bool = True,
    ) -> None:
        self.mesh0 = mesh
        self.dim = mesh.dim
        self.order = mesh.order
        self.thermo_order = thermo_order or mesh.order
        self.q1d = q1d or mesh.order + 2
        self.material = material or MaterialModel()
        self.viscosity = viscosity or ViscosityModel()
        self.steps = steps or StepControls()
        self.place = place or ExecPlace.sequential()
        self.memory = memory or get_memory_manager()
        self.cg_rel_tol = cg_rel_tol
        self.cg_max_iter = cg_max_iter

        self.kinematic = mesh.coordinate_space()
        self.thermo: FiniteElementSpace = l2_space(mesh.ne, self.thermo_order, self.dim)
        self.basis_k = lobatto_basis(self.order, self.q1d)
        self.basis_t = lobatto_basis(self.thermo_order, self.q1d)
        self.quad = self.basis_k.quad
        self.essential = mesh.wall_dofs() if wall_bc else np.zeros(0, dtype=np.int64)
        self.energy_clamps = 0
        self._phase_qdata0: np.ndarray | None = None

    # -- phase setup

    def start_phase(self, state: HydroState) -> None:
        """Build the velocity and energy mass operators from the phase's mass weights"""
        mass_q = quadrature_weights(self.quad, self.dim) * state.qdata0
        kwargs = {"place": self.place, "memory": self.memory}
        self.mass_v = MassPA(space=self.kinematic, basis=self.basis_k, qdata=mass_q, **kwargs)
        self.mass_v_bc = ConstrainedOperator(self.mass_v, self.essential)
        self._mass_v_diag = self.mass_v_bc.diagonal()
        self.mass_e = MassPA(space=self.thermo, basis=self.basis_t, qdata=mass_q, **kwargs)
        self.mass_e_inv = np.linalg.inv(self.mass_e.element_matrices())
        self._phase_qdata0 = state.qdata0

    def _ensure_phase(self, state: HydroState) -> None:
        if self._phase_qdata0 is not state.qdata0:
            self.start_phase(state)

    def mesh_at(self, x: np.ndarray) -> HighOrderMesh:
        return self.mesh0.with_coords(x.reshape(self.dim, -1))

    def geometry(self, x: np.ndarray) -> GeometricFactors:
        return compute_geometric_factors(self.mesh_at(x), self.quad)

    # -- quadrature data

    def density_at_points(self, state: HydroState, geom: GeometricFactors | None = None) -> np.ndarray:
        geom = geom or self.geometry(state.x)
        return state.qdata0 / geom.detJ

    def energy_at_points(self, e: np.ndarray) -> np.ndarray:
        return interp(self.basis_t, gather(self.thermo, e)[0], self.dim)

    def velocity_gradient(self, v: np.ndarray, geom: GeometricFactors) -> np.ndarray:
        """(NE, Q^d, d, d) physical velocity gradient, ``[..., a, c] = dv_a/dx_c``"""
        dv_dxi = np.moveaxis(interp_grad(self.basis_k, gather(self.kinematic, v), self.dim), 0, -2)
        return dv_dxi @ geom.Jinv

    def stress_qdata(self, state: HydroState, geom: GeometricFactors | None = None) -> StressData:
        """Total stress, per-point wave speed and length scale"""
        geom = geom or self.geometry(state.x)
        gamma = self.material.gamma
        rho = self.density_at_points(state, geom)
        e_q = self.energy_at_points(state.e)
        clamped = int(np.count_nonzero(e_q < 0))
        if clamped:
            self.energy_clamps += clamped
            logger.warning(f"clamped negative internal energy at {clamped} points (total {self.energy_clamps})")
            e_q = np.maximum(e_q, 0.0)
        pressure = (gamma - 1.0) * rho * e_q
        sound = np.sqrt(gamma * (gamma - 1.0) * e_q)

        eye = np.eye(self.dim)
        stress = -pressure[..., None, None] * eye
        h = length_scale(geom.detJ, self.dim, self.order)
        q1, q2 = self.viscosity.q1, self.viscosity.q2
        if q1 > 0 or q2 > 0:
            grad_v = self.velocity_gradient(state.v, geom)
            eps = 0.5 * (grad_v + np.swapaxes(grad_v, -1, -2))
            div = np.trace(grad_v, axis1=-2, axis2=-1)
            mu = np.where(div < 0, rho * (q2 * h * h * np.abs(div) + q1 * h * sound), 0.0)
            stress = stress + mu[..., None, None] * eps

        v_q = np.moveaxis(interp(self.basis_k, gather(self.kinematic, state.v), self.dim), 0, -1)
        speed = sound + np.linalg.norm(v_q, axis=-1)
        return StressData(stress=stress, wave_speed=speed, length=h, density=rho, clamped=clamped)

    def force_operator(self, geom: GeometricFactors, stress: np.ndarray) -> ForcePA:
        return force_setup(
            self.kinematic,
            self.thermo,
            self.basis_k,
            self.basis_t,
            geom,
            stress,
            place=self.place,
            memory=self.memory,
        )

    # -- right-hand sides

    def momentum_rhs(self, force: ForcePA) -> np.ndarray:
        """dv/dt from ``M_v dv/dt = -F 1`` with wall rows eliminated"""
        rhs = self.mass_v_bc.eliminate_rhs(-force.mult(np.ones(self.thermo.vsize)))
        accel, _ = cg_solve(
            self.mass_v_bc.mult,
            rhs,
            precond=self._mass_v_diag,
            rel_tol=self.cg_rel_tol,
            max_iter=self.cg_max_iter,
        )
        return accel

    def energy_rhs(self, force: ForcePA, v: np.ndarray) -> np.ndarray:
        """de/dt = M_E^{-1} F^T v, inverted element by element"""
        rhs = force.mult_transpose(v).reshape(self.thermo.ne, -1)
        return np.einsum("eij,ej->ei", self.mass_e_inv, rhs).reshape(-1)

    def timestep_estimate(self, data: StressData) -> float:
        speed = data.wave_speed
        if not np.any(speed > 0):
            return self.steps.dt_max
        ratio = np.divide(data.length, speed, out=np.full_like(speed, np.inf), where=speed > 0)
        dt = self.steps.cfl * float(ratio.min())
        if dt < self.steps.dt_min:
            raise TimestepTooSmallError(dt, self.steps.dt_min)
        return min(dt, self.steps.dt_max)

    # -- time integration

    def _stage(self, state: HydroState, x: np.ndarray, v: np.ndarray, e: np.ndarray, dt: float):
        geom = self.geometry(x)
        staged = replace(state, x=x, v=v, e=e)
        force = self.force_operator(geom, self.stress_qdata(staged, geom).stress)
        accel = self.momentum_rhs(force)
        v_avg = state.v + 0.5 * dt * accel
        return accel, v_avg, self.energy_rhs(force, v_avg)

    def _try_step(self, state: HydroState, dt: float) -> HydroState:
        _, v_half, de = self._stage(state, state.x, state.v, state.e, dt)
        x_half = state.x + 0.5 * dt * v_half
        e_half = state.e + 0.5 * dt * de
        accel, v_avg, de = self._stage(state, x_half, v_half, e_half, dt)
        new = HydroState(
            x=state.x + dt * v_avg,
            v=state.v + dt * accel,
            e=state.e + dt * de,
            qdata0=state.qdata0,
            t=state.t + dt,
        )
        self.geometry(new.x)
        return new

    def rk2_step(self, state: HydroState, dt: float) -> tuple[HydroState, float]:
        """One RK2-average step; halves dt on an inverted element, at most five times"""
        self._ensure_phase(state)
        for _ in range(MAX_STEP_RETRIES):
            try:
                return self._try_step(state, dt), dt
            except InvertedElementError as exc:
                logger.info(f"step rejected ({exc}); retrying with dt={0.5 * dt:.3e}")
                dt *= 0.5
        return self._try_step(state, dt), dt

    def advance(self, state: HydroState, t_stop: float | None = None) -> tuple[HydroState, float]:
        """CFL-limited step, shortened so as not to pass ``t_stop``"""
        self._ensure_phase(state)
        dt = self.timestep_estimate(self.stress_qdata(state))
        if t_stop is not None and state.t + dt > t_stop:
            dt = max(t_stop - state.t, np.finfo(float).tiny)
        return self.rk2_step(state, dt)

    # -- diagnostics

    def energies(self, state: HydroState) -> EnergyReport:
        self._ensure_phase(state)
        mass = float(np.sum(self.mass_v.qdata))
        kinetic = 0.5 * float(state.v @ self.mass_v.mult(state.v))
        internal = float(np.sum(self.mass_e.mult(state.e)))
        return EnergyReport(mass=mass, kinetic=kinetic, internal=internal)

"""Three-phase ALE loop: Lagrange cycles, mesh optimization, remap"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from ale_minihydro.exceptions import AleError, PhaseError
from ale_minihydro.kernel_exec import ExecPlace
from ale_minihydro.lagrange_hydro import HydroState, LagrangianHydro
from ale_minihydro.memory_pool import MemoryManager, get_memory_manager
from ale_minihydro.mesh_fespace import HighOrderMesh, min_det_jacobian, read_mesh
from ale_minihydro.models import (
    CycleRecord,
    EnergyReport,
    MaterialModel,
    PoolStats,
    RemapDiagnostics,
    RunConfig,
    TmopSummary,
)
from ale_minihydro.parameters import ArenaKind, Phase, TargetMode, TmopMode
from ale_minihydro.presets import Preset, problem_preset
from ale_minihydro.remap_fct import admissible_target, remap_all
from ale_minihydro.tmop_mesh_opt import (
    AdaptivityField,
    QualityMetric,
    ShapeSizeMetric,
    TargetTransform,
    advect_adaptivity,
    build_targets,
    make_objective,
    newton_solve,
    shape_metric,
    summarize,
)

logger = logging.getLogger(__name__)

# target size ratio of the dense region in adapt mode
ADAPT_REFINEMENT = 2.0


@dataclass
class RunResult:
    state: HydroState
    hydro: LagrangianHydro
    preset: Preset
    initial: EnergyReport
    final: EnergyReport
    cycles: list[CycleRecord] = field(default_factory=list)
    tmop: list[TmopSummary] = field(default_factory=list)
    remaps: list[RemapDiagnostics] = field(default_factory=list)
    timings: dict[Phase, float] = field(default_factory=dict)
    pool: dict[ArenaKind, PoolStats] = field(default_factory=dict)

    @property
    def mesh(self) -> HighOrderMesh:
        return self.hydro.mesh_at(self.state.x)

    @property
    def mass_drift(self) -> float:
        return abs(self.final.mass - self.initial.mass) / abs(self.initial.mass)

    @property
    def energy_drift(self) -> float:
        return abs(self.final.total - self.initial.total) / abs(self.initial.total)


@dataclass
class _MeshOptimizer:
    """TMOP setup shared by every mesh-optimization phase of a run"""

    config: RunConfig
    hydro: LagrangianHydro
    preset: Preset
    xi: AdaptivityField | None = None
    targets: TargetTransform | None = None

    def __post_init__(self) -> None:
        mesh0 = self.hydro.mesh0
        if self.config.tmop.mode == TmopMode.ADAPT:
            self.xi = initial_adaptivity(self.preset, mesh0)
        else:
            self.targets = build_targets(mesh0, TargetMode.IDEAL_UNIFORM, q1d=self.hydro.q1d)

    @property
    def metric(self) -> QualityMetric:
        shape = shape_metric(self.hydro.dim)
        return ShapeSizeMetric(shape) if self.xi is not None else shape

    def current_targets(self) -> TargetTransform:
        if self.xi is None:
            return self.targets
        return build_targets(self.hydro.mesh0, TargetMode.SIZE_ADAPTED, xi=self.xi, q1d=self.hydro.q1d)

    def optimize(self, x: np.ndarray) -> tuple[np.ndarray, TmopSummary]:
        hydro, controls = self.hydro, self.config.tmop
        obj = make_objective(
            hydro.mesh_at(x),
            self.current_targets(),
            metric=self.metric,
            gamma=controls.limiting_weight,
            q1d=hydro.q1d,
            place=hydro.place,
            memory=hydro.memory,
        )
        result = newton_solve(obj, x, controls)
        summary = summarize(obj, x, result)
        logger.info(
            f"mesh optimization: {summary.iterations} Newton iterations, "
            f"F {summary.f_before:.6e} -> {summary.f_after:.6e}, "
            f"min detJ {summary.min_det_before:.3e} -> {summary.min_det_after:.3e}"
        )
        return result.x, summary

    def follow(self, x_old: np.ndarray, x_new: np.ndarray) -> None:
        """Carry the adaptivity field along with the optimized mesh"""
        if self.xi is None:
            return
        self.xi = advect_adaptivity(
            self.xi,
            self.hydro.mesh_at(x_old),
            x_new - x_old,
            pseudo_cfl=self.config.remap.pseudo_cfl,
            q1d=self.hydro.q1d,
            place=self.hydro.place,
            memory=self.hydro.memory,
        )


def initial_adaptivity(preset: Preset, mesh: HighOrderMesh) -> AdaptivityField:
    """Smaller targets (xi = 1) in the dense region, larger (xi = 2) elsewhere"""
    rho = np.asarray(preset.density(mesh.x.T), dtype=np.float64)
    return AdaptivityField(np.where(rho < rho.mean(), ADAPT_REFINEMENT, 1.0))


def energy_fixup(hydro: LagrangianHydro, state: HydroState, deficit: float) -> HydroState:
    """Deposit ``deficit`` uniformly into specific internal energy"""
    mass = hydro.energies(state).mass
    fixed = state.copy()
    fixed.e += deficit / mass
    return fixed


def _ale_due(config: RunConfig, hydro: LagrangianHydro, state: HydroState, cycle: int) -> bool:
    if not config.ale_enabled:
        return False
    if cycle % config.remap_every == 0:
        return True
    if config.min_detj_trigger is None:
        return False
    return min_det_jacobian(hydro.mesh_at(state.x), hydro.quad) < config.min_detj_trigger


def _phase(cycle: int, phase: Phase, action: Callable, *args):
    try:
        return action(*args)
    except AleError as exc:
        raise PhaseError(cycle, phase.value, exc) from exc


def build_hydro(config: RunConfig, memory: MemoryManager | None = None):
    """Initial state and Lagrangian solver for a run configuration"""
    mesh = read_mesh(config.mesh_file) if config.mesh_file else None
    initial = problem_preset(
        config.preset,
        order=config.order,
        elements=tuple(config.elements) if config.elements else None,
        q1d=config.q1d,
        mesh=mesh,
    )
    hydro = LagrangianHydro(
        initial.mesh,
        q1d=config.q1d,
        material=MaterialModel(gamma=config.gamma or initial.preset.gamma),
        viscosity=config.viscosity,
        steps=config.steps,
        place=ExecPlace.parse(config.exec_place),
        memory=memory or get_memory_manager(),
        cg_rel_tol=config.cg_rel_tol,
        cg_max_iter=config.cg_max_iter,
    )
    return initial, hydro


def run_ale(
    config: RunConfig,
    memory: MemoryManager | None = None,
    on_cycle: Callable[[CycleRecord], None] | None = None,
) -> RunResult:
    """Run ``config.cycles`` Lagrange cycles with periodic mesh optimization and remap.

    Any phase failure is re-raised as :class:`PhaseError` naming the cycle
    and phase.
    """
    start = perf_counter()
    initial, hydro = build_hydro(config, memory)
    state = initial.state
    optimizer = _MeshOptimizer(config, hydro, initial.preset) if config.ale_enabled else None
    result = RunResult(
        state=state,
        hydro=hydro,
        preset=initial.preset,
        initial=hydro.energies(state),
        final=hydro.energies(state),
        timings={phase: 0.0 for phase in Phase},
    )
    logger.info(
        f"run {config.preset}: {hydro.mesh0.ne} elements, order {hydro.order}, "
        f"{hydro.kinematic.vsize} kinematic dofs, {hydro.thermo.vsize} thermodynamic dofs, "
        f"exec {hydro.place}"
    )

    for cycle in range(1, config.cycles + 1):
        if state.t >= config.steps.t_final:
            logger.info(f"reached t_final={config.steps.t_final} after {cycle - 1} cycles")
            break
        clock = perf_counter()
        state, dt = _phase(cycle, Phase.LAGRANGE, hydro.advance, state, config.steps.t_final)
        lagrange_seconds = perf_counter() - clock
        meshopt_seconds = remap_seconds = 0.0

        if _ale_due(config, hydro, state, cycle):
            clock = perf_counter()
            x_opt, summary = _phase(cycle, Phase.MESHOPT, optimizer.optimize, state.x)
            x_opt, kept = _phase(cycle, Phase.MESHOPT, admissible_target, hydro, state.x, x_opt)
            if kept < 1.0:
                logger.warning(f"cycle {cycle}: optimized mesh pulled back to {kept:g} of its displacement")
            _phase(cycle, Phase.MESHOPT, optimizer.follow, state.x, x_opt)
            meshopt_seconds = perf_counter() - clock
            result.tmop.append(summary)

            clock = perf_counter()
            remapped, diagnostics = _phase(cycle, Phase.REMAP, remap_all, hydro, state, x_opt, config.remap)
            if config.energy_fixup:
                deficit = (diagnostics.kinetic_before + diagnostics.internal_before) - (
                    diagnostics.kinetic_after + diagnostics.internal_after
                )
                remapped = energy_fixup(hydro, remapped, deficit)
            state = remapped
            remap_seconds = perf_counter() - clock
            result.remaps.append(diagnostics)

        energies = hydro.energies(state)
        record = CycleRecord(
            cycle=cycle,
            t=state.t,
            dt=dt,
            mass=energies.mass,
            kinetic=energies.kinetic,
            internal=energies.internal,
            total=energies.total,
            lagrange_seconds=lagrange_seconds,
            meshopt_seconds=meshopt_seconds,
            remap_seconds=remap_seconds,
        )
        result.cycles.append(record)
        result.timings[Phase.LAGRANGE] += lagrange_seconds
        result.timings[Phase.MESHOPT] += meshopt_seconds
        result.timings[Phase.REMAP] += remap_seconds
        logger.info(
            f"cycle {cycle}: t={state.t:.6e} dt={dt:.3e} E={energies.total:.12e} "
            f"(kinetic {energies.kinetic:.6e}, internal {energies.internal:.6e})"
        )
        if on_cycle is not None:
            on_cycle(record)

    result.state = state
    result.final = hydro.energies(state)
    result.timings[Phase.TOTAL] = perf_counter() - start
    result.pool = hydro.memory.snapshot_stats()
    logger.info(
        f"finished {len(result.cycles)} cycles, {len(result.remaps)} remaps: "
        f"mass drift {result.mass_drift:.3e}, energy drift {result.energy_drift:.3e}"
    )
    return result

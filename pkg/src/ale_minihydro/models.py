from pydantic import BaseModel, Field, model_validator

from ale_minihydro.parameters import ArenaKind, Phase, PresetName, TmopMode


class StepControls(BaseModel):
    """Time-step control for the Lagrange phase"""

    cfl: float = Field(default=0.5, gt=0, le=1)
    dt_min: float = Field(default=1e-12, gt=0)
    dt_max: float = Field(default=1e-1, gt=0)
    t_final: float = Field(default=0.5, gt=0)

    @model_validator(mode="after")
    def check_range(self) -> "StepControls":
        if self.dt_min > self.dt_max:
            raise ValueError("dt_min must not exceed dt_max")
        return self


class MaterialModel(BaseModel):
    """Ideal gas, p = (gamma - 1) rho e"""

    gamma: float = Field(default=1.4, gt=1)


class ViscosityModel(BaseModel):
    """Linear/quadratic tensor artificial viscosity coefficients"""

    q1: float = Field(default=0.5, ge=0)
    q2: float = Field(default=2.0, ge=0)


class RemapConfig(BaseModel):
    """Pseudo-time stepping between the Lagrangian and optimized meshes"""

    n_pseudo_steps: int | None = Field(default=None, ge=1)
    pseudo_cfl: float = Field(default=0.25, gt=0, le=1)
    use_limiter: bool = True


class TmopControls(BaseModel):
    """Newton solver and objective settings for mesh optimization"""

    mode: TmopMode = TmopMode.UNIFORM
    newton_rel_tol: float = Field(default=1e-10, gt=0)
    newton_abs_tol: float = Field(default=1e-13, ge=0)
    max_newton: int = Field(default=20, ge=0)
    max_backtracks: int = Field(default=20, ge=1)
    cg_rel_tol: float = Field(default=1e-8, gt=0)
    cg_max_iter: int = Field(default=100, ge=1)
    limiting_weight: float | None = Field(default=None, ge=0)


class PoolStats(BaseModel):
    arena: ArenaKind
    current_bytes: int = 0
    peak_bytes: int = 0
    pool_capacity_bytes: int = 0
    allocation_count: int = 0
    release_count: int = 0
    growth_events: int = 0


class EnergyReport(BaseModel):
    mass: float
    kinetic: float
    internal: float

    @property
    def total(self) -> float:
        return self.kinetic + self.internal


class CycleRecord(BaseModel):
    cycle: int
    t: float
    dt: float
    mass: float
    kinetic: float
    internal: float
    total: float
    lagrange_seconds: float = 0.0
    meshopt_seconds: float = 0.0
    remap_seconds: float = 0.0


class TmopSummary(BaseModel):
    iterations: int
    converged: bool
    f_before: float
    f_after: float
    min_det_before: float
    min_det_after: float


class FieldExtrema(BaseModel):
    field: str
    min_before: float
    max_before: float
    min_after: float
    max_after: float


class RemapDiagnostics(BaseModel):
    n_pseudo_steps: int
    mass_before: float
    mass_after: float
    internal_before: float
    internal_after: float
    kinetic_before: float
    kinetic_after: float
    extrema: list[FieldExtrema] = []
    limiter_activity: float = 0.0
    # largest relative gap between transported and target lumped volumes
    volume_mismatch: float = 0.0
    # mass added where the interpolated density was raised to the floor
    floor_mass: float = 0.0

    @property
    def mass_delta(self) -> float:
        return self.mass_after - self.mass_before

    @property
    def internal_delta(self) -> float:
        return self.internal_after - self.internal_before


class ThroughputRecord(BaseModel):
    phase: Phase
    p: int
    dofs: int
    cycles: int
    seconds: float = Field(gt=0)
    dof_per_s: float = Field(gt=0)


class ComplexityRow(BaseModel):
    d: int
    p: int
    n: int
    pa_storage: int
    fa_storage: int
    pa_setup_flops: int
    pa_apply_flops: int
    fa_apply_flops: int


class ComplexitySlopes(BaseModel):
    d: int
    pa_storage: float
    pa_setup: float
    pa_apply: float
    fa_storage: float
    expected_pa_storage: int
    expected_pa_apply: int
    expected_fa_storage: int


class ScalingRow(BaseModel):
    workers: int
    seconds_per_cycle: float = Field(gt=0)
    efficiency: float


class RunConfig(BaseModel):
    """Full configuration of an ALE run, mirrored by CLI flags and config files"""

    preset: PresetName = PresetName.TRIPLE_PT_2D
    elements: list[int] | None = None
    mesh_file: str | None = None
    order: int = Field(default=2, ge=1, le=4)
    q1d: int | None = Field(default=None, ge=1)
    exec_place: str = "seq"
    steps: StepControls = StepControls()
    gamma: float | None = Field(default=None, gt=1)
    viscosity: ViscosityModel = ViscosityModel()
    cycles: int = Field(default=50, ge=0)
    remap_every: int = Field(default=25, ge=1)
    min_detj_trigger: float | None = Field(default=None, gt=0)
    tmop: TmopControls = TmopControls()
    remap: RemapConfig = RemapConfig()
    cg_rel_tol: float = Field(default=1e-12, gt=0)
    cg_max_iter: int = Field(default=1000, ge=1)
    energy_fixup: bool = True
    mem_report: bool = False
    out_dir: str | None = None
    dump_matrix: str | None = None

    @property
    def ale_enabled(self) -> bool:
        return self.tmop.mode != TmopMode.OFF


class StorageExample(BaseModel):
    """Stored values of full vs partial assembly for one mesh under one counting convention"""

    convention: str
    d: int
    p: int
    elements: int
    fa_values: int
    pa_values: int

    @property
    def ratio(self) -> float:
        return self.fa_values / self.pa_values

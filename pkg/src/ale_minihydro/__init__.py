from ale_minihydro.driver import RunResult, run_ale
from ale_minihydro.lagrange_hydro import HydroState, LagrangianHydro
from ale_minihydro.models import RunConfig
from ale_minihydro.presets import problem_preset
from ale_minihydro.remap_fct import remap_all

__all__ = ["HydroState", "LagrangianHydro", "RunConfig", "RunResult", "problem_preset", "remap_all", "run_ale"]

"""Error hierarchy for the ALE mini-app"""


class AleError(Exception):
    """Base class for every error raised by ale_minihydro"""


class ConfigError(AleError):
    """Invalid configuration or input; the CLI exits with code 3"""


class NumericalError(AleError):
    """Numerical abort; the CLI exits with code 2"""


class DimensionMismatchError(ConfigError):
    def __init__(self, what: str, expected, got) -> None:
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class UnknownPresetError(ConfigError):
    def __init__(self, name: str, available: list[str]) -> None:
        super().__init__(f"unknown preset {name!r}; available: {', '.join(available)}")
        self.name = name
        self.available = available


class SizeGuardError(ConfigError):
    def __init__(self, dofs: int, limit: int) -> None:
        super().__init__(f"full assembly refused for {dofs} DOFs (limit {limit})")
        self.dofs = dofs
        self.limit = limit


class InvertedElementError(NumericalError):
    def __init__(self, element: int, point: int, det: float) -> None:
        super().__init__(f"inverted element {element}: detJ = {det:.6e} at point {point}")
        self.element = element
        self.point = point
        self.det = det


class CgNotConvergedError(NumericalError):
    def __init__(self, iterations: int, history: list[float]) -> None:
        last = history[-1] if history else float("nan")
        super().__init__(f"CG did not converge in {iterations} iterations (residual {last:.3e})")
        self.iterations = iterations
        self.history = history


class TimestepTooSmallError(NumericalError):
    def __init__(self, dt: float, dt_min: float) -> None:
        super().__init__(f"time step {dt:.3e} fell below dt_min {dt_min:.3e}")
        self.dt = dt
        self.dt_min = dt_min


class PseudoCflError(NumericalError):
    def __init__(self, requested: int, required: int) -> None:
        super().__init__(f"{requested} pseudo-steps violate the pseudo-CFL; need at least {required}")
        self.requested = requested
        self.required = required


class AdmissibleStepError(NumericalError):
    def __init__(self, dtau: float, max_dtau: float) -> None:
        super().__init__(f"pseudo-step {dtau:.3e} exceeds the max admissible {max_dtau:.3e}")
        self.dtau = dtau
        self.max_dtau = max_dtau


class PhaseError(NumericalError):
    def __init__(self, cycle: int, phase: str, cause: Exception) -> None:
        super().__init__(f"cycle {cycle}, phase {phase}: {cause}")
        self.cycle = cycle
        self.phase = phase
        self.cause = cause


class NonPositiveVolumeError(NumericalError):
    def __init__(self, dof: int, volume: float, tau: float) -> None:
        super().__init__(f"lumped volume of DOF {dof} is {volume:.3e} at pseudo-time {tau:.3f}")
        self.dof = dof
        self.volume = volume
        self.tau = tau

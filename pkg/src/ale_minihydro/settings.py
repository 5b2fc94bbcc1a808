"""Settings for the ALE mini-app"""

from enum import Enum
from logging import basicConfig

from pydantic_settings import BaseSettings, SettingsConfigDict


class LogLevel(Enum):
    """Log Level Enum"""

    CRITICAL = "CRITICAL"
    ERROR = "ERROR"
    WARNING = "WARNING"
    INFO = "INFO"
    DEBUG = "DEBUG"
    NOTSET = "NOTSET"


KIB = 1024
MIB = 1024 * KIB

# team scratch capacity, sized like GPU shared memory
DEFAULT_SCRATCH_BYTES = 48 * KIB
DEFAULT_POOL_INITIAL_BYTES = 4 * MIB
DEFAULT_ALIGNMENT = 64
FULL_ASSEMBLY_MAX_DOFS = 100_000


class Settings(BaseSettings):
    """Settings for the ALE mini-app, read from ``ALE_*`` environment variables"""

    model_config = SettingsConfigDict(env_prefix="ALE_")

    loglevel: LogLevel = LogLevel.INFO
    exec_place: str = "seq"
    pool_initial_bytes: int = DEFAULT_POOL_INITIAL_BYTES
    pool_alignment: int = DEFAULT_ALIGNMENT
    full_assembly_max_dofs: int = FULL_ASSEMBLY_MAX_DOFS
    cg_rel_tol: float = 1e-12
    cg_max_iter: int = 1000
    out_dir: str = "ale-out"

    @classmethod
    def load(cls) -> "Settings":
        """Load method to get settings"""
        settings = Settings()
        basicConfig(level=settings.loglevel.value)
        return settings

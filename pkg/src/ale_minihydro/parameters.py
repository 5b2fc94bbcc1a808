import sys

if sys.version_info >= (3, 11):
    from enum import StrEnum
else:  # backport of enum.StrEnum for Python 3.10
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__


class ExecKind(StrEnum):
    SEQUENTIAL = "seq"
    THREADED = "threads"


class ArenaKind(StrEnum):
    PERMANENT = "permanent"
    TEMPORARY_POOL = "temporary"


class Continuity(StrEnum):
    H1 = "H1"
    L2 = "L2"


class ReduceOp(StrEnum):
    SUM = "sum"
    MIN = "min"
    MAX = "max"


class TmopMode(StrEnum):
    OFF = "off"
    UNIFORM = "uniform"
    ADAPT = "adapt"


class TargetMode(StrEnum):
    IDEAL_UNIFORM = "ideal-uniform"
    SIZE_ADAPTED = "size-adapted"


class PresetName(StrEnum):
    TRIPLE_PT_2D = "triple-pt-2d"
    TRIPLE_PT_3D = "triple-pt-3d"
    SOD_1DX = "sod-1dx"
    TAYLOR_GREEN = "taylor-green"
    UNIFORM = "uniform"


class Phase(StrEnum):
    LAGRANGE = "lagrange"
    MESHOPT = "meshopt"
    REMAP = "remap"
    TOTAL = "total"


ALL_PRESETS: list[str] = [p.value for p in PresetName]

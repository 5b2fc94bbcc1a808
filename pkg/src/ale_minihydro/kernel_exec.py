"""Teams-style hierarchical kernel execution.

A kernel is launched over a grid of ``teams x threads``. The kernel callable is
invoked once per team with a :class:`LaunchContext`; inside it, ``team_loop``
hands out outer indices to teams and ``thread_loop``/``thread_loop_2d`` run the
inner iteration space over the team's threads. Team-shared scratch comes from
``ctx.scratch``.

Backends:

* Sequential: teams run one after another on the calling thread.
* Threaded(N): teams are distributed over a pool of N workers; the threads of
  one team always run on a single worker in a fixed order, so a team's
  floating-point results do not depend on the backend.
"""

import logging
import math
import threading
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cache

import numpy as np

from ale_minihydro.exceptions import AleError, ConfigError
from ale_minihydro.parameters import ExecKind, ReduceOp
from ale_minihydro.settings import DEFAULT_SCRATCH_BYTES

logger = logging.getLogger(__name__)

# Element batch handled by one team in ``for_each_batch``; fixed so both
# backends perform identical arithmetic.
DEFAULT_BATCH = 64
# Reduction partials are formed over fixed-size chunks for the same reason.
REDUCE_CHUNK = 4096
SCRATCH_ALIGN = 64


class KernelLaunchError(AleError):
    def __init__(self, team: int, cause: BaseException) -> None:
        super().__init__(f"kernel failed in team {team}: {cause!r}")
        self.team = team
        self.cause = cause


class ScratchOverflowError(ConfigError):
    def __init__(self, requested: int, capacity: int) -> None:
        super().__init__(f"team scratch request of {requested} bytes exceeds {capacity} bytes")
        self.requested = requested
        self.capacity = capacity


@dataclass(frozen=True)
class ExecPlace:
    """Run-time backend selection"""

    kind: ExecKind = ExecKind.SEQUENTIAL
    worker_count: int = 1

    def __post_init__(self) -> None:
        if self.worker_count < 1:
            raise ConfigError(f"worker_count must be >= 1, got {self.worker_count}")
        if self.kind == ExecKind.SEQUENTIAL and self.worker_count != 1:
            raise ConfigError("the sequential backend has exactly one worker")

    @classmethod
    def sequential(cls) -> "ExecPlace":
        return cls()

    @classmethod
    def threaded(cls, workers: int) -> "ExecPlace":
        return cls(kind=ExecKind.THREADED, worker_count=workers)

    @classmethod
    def parse(cls, text: str) -> "ExecPlace":
        """Parse ``seq`` or ``threads:N``"""
        text = text.strip().lower()
        if text in ("seq", "sequential"):
            return cls.sequential()
        kind, _, count = text.partition(":")
        if kind != ExecKind.THREADED.value or not count.isdigit():
            raise ConfigError(f"invalid exec place {text!r}; use 'seq' or 'threads:N'")
        return cls.threaded(int(count))

    def __str__(self) -> str:
        if self.kind == ExecKind.SEQUENTIAL:
            return "seq"
        return f"threads:{self.worker_count}"


@dataclass(frozen=True)
class GridConfig:
    teams: int
    thread_dims: tuple[int, ...] = (1,)

    def __post_init__(self) -> None:
        if self.teams < 1:
            raise ConfigError(f"grid needs at least one team, got {self.teams}")
        if not 1 <= len(self.thread_dims) <= 3:
            raise ConfigError("thread_dims takes one to three extents")
        if any(t < 1 for t in self.thread_dims):
            raise ConfigError(f"thread extents must be positive, got {self.thread_dims}")

    @property
    def threads_per_team(self) -> int:
        return math.prod(self.thread_dims)


class TeamScratch:
    """Fixed-size byte region shared by the threads of one team, allocated on first use"""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._region: np.ndarray | None = None
        self._used = 0

    @property
    def used(self) -> int:
        return self._used

    @property
    def allocated(self) -> bool:
        return self._region is not None

    def alloc(self, shape: int | tuple[int, ...], dtype=np.float64) -> np.ndarray:
        dtype = np.dtype(dtype)
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        nbytes = math.prod(shape) * dtype.itemsize
        start = -(-self._used // SCRATCH_ALIGN) * SCRATCH_ALIGN
        if start + nbytes > self.capacity:
            raise ScratchOverflowError(start + nbytes, self.capacity)
        if self._region is None:
            self._region = np.empty(self.capacity, dtype=np.uint8)
        self._used = start + nbytes
        view = self._region[start : start + nbytes].view(dtype).reshape(shape)
        view[...] = 0
        return view


@dataclass
class LaunchContext:
    """Per-team handle passed to the kernel body"""

    team: int
    grid: GridConfig
    _scratch: TeamScratch
    sync_count: int = field(default=0)

    def scratch(self, shape: int | tuple[int, ...], dtype=np.float64) -> np.ndarray:
        return self._scratch.alloc(shape, dtype)

    def team_sync(self) -> None:
        # Threads of a team run in order on one worker, so every write issued
        # by an earlier thread_loop is already visible here.
        self.sync_count += 1


@cache
def _executor(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix=f"ale-team-{workers}")


_launch_lock = threading.Lock()


def launch(
    place: ExecPlace,
    grid: GridConfig,
    kernel: Callable[[LaunchContext], None],
    shared_bytes: int | None = None,
    max_shared_bytes: int = DEFAULT_SCRATCH_BYTES,
) -> None:
    """Run ``kernel`` once per team of ``grid`` on the selected backend"""
    capacity = max_shared_bytes if shared_bytes is None else shared_bytes
    if capacity > max_shared_bytes:
        raise ScratchOverflowError(capacity, max_shared_bytes)

    def run_team(team: int) -> None:
        ctx = LaunchContext(team=team, grid=grid, _scratch=TeamScratch(capacity))
        try:
            kernel(ctx)
        except KernelLaunchError:
            raise
        except Exception as exc:
            raise KernelLaunchError(team, exc) from exc

    if place.kind == ExecKind.SEQUENTIAL or place.worker_count == 1 or grid.teams == 1:
        for team in range(grid.teams):
            run_team(team)
        return

    with _launch_lock:
        pool = _executor(place.worker_count)
    futures = [pool.submit(run_team, team) for team in range(grid.teams)]
    # surface the lowest failing team so the error does not depend on scheduling
    failure: KernelLaunchError | None = None
    for future in futures:
        exc = future.exception()
        if exc is not None and failure is None:
            failure = exc if isinstance(exc, KernelLaunchError) else KernelLaunchError(-1, exc)
    if failure is not None:
        raise failure


def team_loop(ctx: LaunchContext, index_range: range, body: Callable[[int], None]) -> None:
    """Outer loop: position k of the range goes to team ``k % teams``"""
    for k in range(ctx.team, len(index_range), ctx.grid.teams):
        body(index_range[k])


def thread_loop(ctx: LaunchContext, n: int, body: Callable[[int], None]) -> None:
    for i in range(n):
        body(i)


def thread_loop_2d(
    ctx: LaunchContext, extents: tuple[int, int], body: Callable[[int, int], None]
) -> None:
    n1, n2 = extents
    for j in range(n2):
        for i in range(n1):
            body(i, j)


def forall(place: ExecPlace, n: int, body: Callable[[int], None]) -> None:
    """Single-level loop over ``[0, n)``, one index per team"""
    if n == 0:
        return
    teams = min(n, place.worker_count * 4)
    launch(place, GridConfig(teams=teams), lambda ctx: team_loop(ctx, range(n), body))


def batches(n: int, batch: int = DEFAULT_BATCH) -> list[slice]:
    return [slice(start, min(start + batch, n)) for start in range(0, n, batch)]


def for_each_batch(
    place: ExecPlace, n: int, body: Callable[[slice], None], batch: int = DEFAULT_BATCH
) -> None:
    """Launch one team per contiguous batch of ``[0, n)``; bodies write disjoint output"""
    parts = batches(n, batch)
    if not parts:
        return
    launch(place, GridConfig(teams=len(parts)), lambda ctx: body(parts[ctx.team]))


_IDENTITY = {ReduceOp.SUM: 0.0, ReduceOp.MIN: np.inf, ReduceOp.MAX: -np.inf}
_COMBINE = {ReduceOp.SUM: np.add, ReduceOp.MIN: np.minimum, ReduceOp.MAX: np.maximum}
_REDUCE = {ReduceOp.SUM: np.sum, ReduceOp.MIN: np.min, ReduceOp.MAX: np.max}


def reduce(
    place: ExecPlace,
    index_range: range,
    op: ReduceOp | str,
    fn: Callable[[np.ndarray], np.ndarray],
) -> float:
    """Reduce ``fn`` over ``index_range``.

    ``fn`` is vectorized: it receives an index array and returns the mapped
    values. Partials are formed per fixed-size chunk and combined in chunk
    order, so the result is bitwise identical on every backend.
    """
    op = ReduceOp(op)
    indices = np.asarray(index_range, dtype=np.int64)
    if indices.size == 0:
        return float(_IDENTITY[op])
    parts = batches(indices.size, REDUCE_CHUNK)
    partials = np.full(len(parts), _IDENTITY[op])

    def kernel(ctx: LaunchContext) -> None:
        chunk = indices[parts[ctx.team]]
        values = np.broadcast_to(np.asarray(fn(chunk), dtype=np.float64), chunk.shape)
        partials[ctx.team] = _REDUCE[op](values)

    launch(place, GridConfig(teams=len(parts)), kernel)
    total = _IDENTITY[op]
    for value in partials:
        total = _COMBINE[op](total, value)
    return float(total)

"""Arena memory manager: a permanent arena and a coalescible temporary pool.

Permanent allocations live until shutdown. Temporary allocations are carved
out of pool chunks with a first-fit free list and go back to the pool on
release, so short-lived scratch buffers of different phases share the same
memory. Telemetry counters are always on.
"""

import logging
import math
import threading
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from ale_minihydro.exceptions import AleError, ConfigError
from ale_minihydro.models import PoolStats
from ale_minihydro.parameters import ArenaKind
from ale_minihydro.settings import DEFAULT_ALIGNMENT, DEFAULT_POOL_INITIAL_BYTES

logger = logging.getLogger(__name__)

INT64_MAX = np.iinfo(np.int64).max


class PoolOutOfMemoryError(AleError):
    def __init__(self, requested: int, stats: dict[ArenaKind, PoolStats]) -> None:
        pool = stats[ArenaKind.TEMPORARY_POOL]
        super().__init__(
            f"out of memory allocating {requested} bytes "
            f"(pool capacity {pool.pool_capacity_bytes}, in use {pool.current_bytes})"
        )
        self.requested = requested
        self.stats = stats


class DoubleReleaseError(AleError):
    def __init__(self, handle: "BufferHandle") -> None:
        super().__init__(f"double release of buffer {handle.id}")
        self.handle = handle


class ForeignHandleError(AleError):
    def __init__(self, handle: "BufferHandle") -> None:
        super().__init__(f"buffer {handle.id} was not allocated by this manager")
        self.handle = handle


class LeakError(AleError):
    def __init__(self, report: "LeakReport") -> None:
        super().__init__(
            f"{len(report.temporary)} temporary buffer(s) still live at shutdown "
            f"({sum(h.size_bytes for h in report.temporary)} bytes)"
        )
        self.report = report


@dataclass(eq=False)
class BufferHandle:
    id: int
    size_bytes: int
    arena: ArenaKind
    owner: int
    released: bool = False


@dataclass
class LeakReport:
    permanent: list[BufferHandle] = field(default_factory=list)
    temporary: list[BufferHandle] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.permanent and not self.temporary


def aligned_zeros(nbytes: int, alignment: int = DEFAULT_ALIGNMENT) -> np.ndarray:
    raw = np.zeros(nbytes + alignment, dtype=np.uint8)
    offset = (-raw.ctypes.data) % alignment
    return raw[offset : offset + nbytes]


@dataclass
class _Chunk:
    id: int
    buffer: np.ndarray
    # sorted (offset, size) pairs
    free: list[tuple[int, int]]

    @property
    def size(self) -> int:
        return self.buffer.size

    def take(self, size: int) -> int | None:
        for k, (offset, length) in enumerate(self.free):
            if length >= size:
                if length == size:
                    del self.free[k]
                else:
                    self.free[k] = (offset + size, length - size)
                return offset
        return None

    def give_back(self, offset: int, size: int) -> None:
        self.free.append((offset, size))
        self.free.sort()

    def merge_free(self) -> None:
        merged: list[tuple[int, int]] = []
        for offset, length in self.free:
            if merged and merged[-1][0] + merged[-1][1] == offset:
                merged[-1] = (merged[-1][0], merged[-1][1] + length)
            else:
                merged.append((offset, length))
        self.free = merged

    @property
    def fully_free(self) -> bool:
        return sum(length for _, length in self.free) == self.size


@dataclass
class _Counters:
    current: int = 0
    peak: int = 0
    allocations: int = 0
    releases: int = 0
    growth_events: int = 0

    def on_alloc(self, size: int) -> None:
        self.current += size
        self.peak = max(self.peak, self.current)
        self.allocations += 1

    def on_release(self, size: int) -> None:
        self.current -= size
        self.releases += 1


class MemoryManager:
    """Permanent arena plus temporary pool with allocation telemetry"""

    _owners = count(1)

    def __init__(
        self,
        initial_block: int = DEFAULT_POOL_INITIAL_BYTES,
        alignment: int = DEFAULT_ALIGNMENT,
        capacity_limit: int | None = None,
    ) -> None:
        if alignment <= 0 or alignment & (alignment - 1):
            raise ConfigError(f"alignment must be a power of two, got {alignment}")
        self.initial_block = initial_block
        self.alignment = alignment
        self.capacity_limit = capacity_limit
        self._lock = threading.Lock()
        self._owner = next(MemoryManager._owners)
        self._ids = count(1)
        self._chunk_ids = count()
        self._chunks: list[_Chunk] = []
        # id -> (handle, chunk id, offset) for pool; (handle, buffer) for permanent
        self._live_pool: dict[int, tuple[BufferHandle, int, int]] = {}
        self._live_permanent: dict[int, tuple[BufferHandle, np.ndarray]] = {}
        self._counters = {kind: _Counters() for kind in ArenaKind}

    def _round(self, size: int) -> int:
        return -(-size // self.alignment) * self.alignment

    def _chunk(self, chunk_id: int) -> _Chunk:
        return next(c for c in self._chunks if c.id == chunk_id)

    @property
    def pool_capacity(self) -> int:
        return sum(c.size for c in self._chunks)

    def allocate(self, arena: ArenaKind, size_bytes: int) -> BufferHandle:
        """Return a handle to zero-initialized, aligned storage"""
        if size_bytes <= 0:
            raise ConfigError(f"allocation size must be positive, got {size_bytes}")
        arena = ArenaKind(arena)
        size = self._round(size_bytes)
        with self._lock:
            handle = BufferHandle(id=next(self._ids), size_bytes=size, arena=arena, owner=self._owner)
            if arena == ArenaKind.PERMANENT:
                try:
                    buffer = aligned_zeros(size, self.alignment)
                except MemoryError:
                    raise PoolOutOfMemoryError(size, self._stats_locked()) from None
                self._live_permanent[handle.id] = (handle, buffer)
            else:
                chunk_id, offset = self._pool_take(size)
                self._chunk(chunk_id).buffer[offset : offset + size] = 0
                self._live_pool[handle.id] = (handle, chunk_id, offset)
            self._counters[arena].on_alloc(size)
        return handle

    def _pool_take(self, size: int) -> tuple[int, int]:
        for attempt in range(2):
            for chunk in self._chunks:
                offset = chunk.take(size)
                if offset is not None:
                    return chunk.id, offset
            if attempt == 0:
                for chunk in self._chunks:
                    chunk.merge_free()
        return self._grow(size)

    def _grow(self, size: int) -> tuple[int, int]:
        # geometric: twice the request, never below the initial block
        chunk_size = self._round(max(self.initial_block, 2 * size))
        if self.capacity_limit is not None and self.pool_capacity + chunk_size > self.capacity_limit:
            chunk_size = self._round(size)
            if self.pool_capacity + chunk_size > self.capacity_limit:
                raise PoolOutOfMemoryError(size, self._stats_locked())
        try:
            buffer = aligned_zeros(chunk_size, self.alignment)
        except MemoryError:
            raise PoolOutOfMemoryError(size, self._stats_locked()) from None
        chunk = _Chunk(id=next(self._chunk_ids), buffer=buffer, free=[(0, chunk_size)])
        self._chunks.append(chunk)
        self._counters[ArenaKind.TEMPORARY_POOL].growth_events += 1
        logger.debug(f"temporary pool grew by {chunk_size} bytes to {self.pool_capacity}")
        offset = chunk.take(size)
        return chunk.id, offset

    def _check_owner(self, handle: BufferHandle) -> None:
        if handle.owner != self._owner:
            raise ForeignHandleError(handle)

    def release(self, handle: BufferHandle) -> None:
        with self._lock:
            self._check_owner(handle)
            if handle.released:
                raise DoubleReleaseError(handle)
            if handle.id in self._live_pool:
                _, chunk_id, offset = self._live_pool.pop(handle.id)
                self._chunk(chunk_id).give_back(offset, handle.size_bytes)
            elif handle.id in self._live_permanent:
                del self._live_permanent[handle.id]
            else:
                raise ForeignHandleError(handle)
            handle.released = True
            self._counters[handle.arena].on_release(handle.size_bytes)

    def coalesce(self, arena: ArenaKind = ArenaKind.TEMPORARY_POOL) -> int:
        """Merge adjacent free blocks and hand fully free chunks back; returns bytes reclaimed"""
        if ArenaKind(arena) != ArenaKind.TEMPORARY_POOL:
            return 0
        with self._lock:
            reclaimed = 0
            kept = []
            for chunk in self._chunks:
                chunk.merge_free()
                if chunk.fully_free:
                    reclaimed += chunk.size
                else:
                    kept.append(chunk)
            self._chunks = kept
        if reclaimed:
            logger.debug(f"coalesce reclaimed {reclaimed} bytes")
        return reclaimed

    def free_blocks(self) -> list[tuple[int, int, int]]:
        """(chunk, offset, size) of every free pool block"""
        with self._lock:
            return [(c.id, off, size) for c in self._chunks for off, size in c.free]

    def view(self, handle: BufferHandle, dtype=np.float64, shape=None) -> np.ndarray:
        """Typed numpy view of a live buffer"""
        dtype = np.dtype(dtype)
        with self._lock:
            self._check_owner(handle)
            if handle.id in self._live_pool:
                _, chunk_id, offset = self._live_pool[handle.id]
                raw = self._chunk(chunk_id).buffer[offset : offset + handle.size_bytes]
            elif handle.id in self._live_permanent:
                raw = self._live_permanent[handle.id][1]
            else:
                raise ForeignHandleError(handle)
        if shape is None:
            return raw.view(dtype)
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return raw[: math.prod(shape) * dtype.itemsize].view(dtype).reshape(shape)

    @contextmanager
    def temporary(self, shape, dtype=np.float64) -> Iterator[np.ndarray]:
        """Borrow a zeroed array from the temporary pool for the duration of the block"""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        nbytes = max(math.prod(shape) * np.dtype(dtype).itemsize, 1)
        handle = self.allocate(ArenaKind.TEMPORARY_POOL, nbytes)
        try:
            yield self.view(handle, dtype, shape)
        finally:
            self.release(handle)

    def _stats_locked(self) -> dict[ArenaKind, PoolStats]:
        stats = {}
        for kind, c in self._counters.items():
            capacity = self.pool_capacity if kind == ArenaKind.TEMPORARY_POOL else c.current
            stats[kind] = PoolStats(
                arena=kind,
                current_bytes=c.current,
                peak_bytes=c.peak,
                pool_capacity_bytes=capacity,
                allocation_count=c.allocations,
                release_count=c.releases,
                growth_events=c.growth_events,
            )
        return stats

    def snapshot_stats(self) -> dict[ArenaKind, PoolStats]:
        with self._lock:
            return self._stats_locked()

    def shutdown(self) -> LeakReport:
        """Report live buffers; live temporary buffers are a leak and raise"""
        with self._lock:
            report = LeakReport(
                permanent=[h for h, _ in self._live_permanent.values()],
                temporary=[h for h, _, _ in self._live_pool.values()],
            )
        for handle in report.permanent:
            logger.warning(f"permanent buffer {handle.id} ({handle.size_bytes} bytes) never released")
        if report.temporary:
            raise LeakError(report)
        return report


def thread_local_footprint(bytes_per_thread: int, max_threads_per_sm: int, num_sms: int) -> int:
    """Bytes a runtime reserves for spilled thread-local arrays on every SM"""
    for name, value in (
        ("bytes_per_thread", bytes_per_thread),
        ("max_threads_per_sm", max_threads_per_sm),
        ("num_sms", num_sms),
    ):
        if value <= 0:
            raise ConfigError(f"{name} must be positive, got {value}")
    total = bytes_per_thread * max_threads_per_sm * num_sms
    if total > INT64_MAX:
        raise OverflowError(f"thread-local footprint {total} overflows 64 bits")
    return total


_default_manager: MemoryManager | None = None


def get_memory_manager() -> MemoryManager:
    """Process-wide manager used when a component is not handed one explicitly"""
    global _default_manager
    if _default_manager is None:
        _default_manager = MemoryManager()
    return _default_manager

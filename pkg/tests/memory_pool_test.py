import threading

import numpy as np
import pytest

from ale_minihydro.exceptions import ConfigError
from ale_minihydro.memory_pool import (
    DoubleReleaseError,
    ForeignHandleError,
    LeakError,
    MemoryManager,
    PoolOutOfMemoryError,
    thread_local_footprint,
)
from ale_minihydro.parameters import ArenaKind

MIB = 1 << 20
POOL = ArenaKind.TEMPORARY_POOL


def test_fresh_manager_counters_are_zero(memory):
    for stats in memory.snapshot_stats().values():
        assert stats.current_bytes == stats.peak_bytes == stats.pool_capacity_bytes == 0
        assert stats.allocation_count == stats.release_count == stats.growth_events == 0


def test_allocate_is_zeroed_and_aligned(memory):
    handle = memory.allocate(POOL, 1000)
    buf = memory.view(handle, np.uint8)
    assert buf.ctypes.data % 64 == 0
    assert handle.size_bytes % 64 == 0
    assert not buf.any()
    buf[:] = 7
    memory.release(handle)
    again = memory.allocate(POOL, 1000)
    assert not memory.view(again, np.uint8).any()
    assert memory.snapshot_stats()[POOL].current_bytes >= 1000


def test_pool_space_is_reused(memory):
    h = memory.allocate(POOL, MIB)
    memory.release(h)
    capacity = memory.pool_capacity
    h = memory.allocate(POOL, MIB)
    assert memory.pool_capacity == capacity
    memory.release(h)


def test_repeated_cycles_grow_once(memory):
    for _ in range(100):
        memory.release(memory.allocate(POOL, MIB))
    stats = memory.snapshot_stats()[POOL]
    assert stats.allocation_count == 100
    assert stats.release_count == 100
    assert stats.growth_events == 1
    assert stats.current_bytes == 0


def test_release_errors(memory):
    h = memory.allocate(POOL, 64)
    memory.release(h)
    with pytest.raises(DoubleReleaseError, match="double release"):
        memory.release(h)
    other = MemoryManager().allocate(POOL, 64)
    with pytest.raises(ForeignHandleError):
        memory.release(other)


def test_foreign_handle_with_colliding_id_leaves_live_buffer_alone(memory):
    live = memory.allocate(POOL, 64)
    other = MemoryManager().allocate(POOL, 64)
    assert other.id == live.id
    with pytest.raises(ForeignHandleError):
        memory.release(other)
    with pytest.raises(ForeignHandleError):
        memory.view(other)
    stats = memory.snapshot_stats()[POOL]
    assert stats.current_bytes == 64
    assert stats.release_count == 0
    memory.release(live)


def test_double_release_detected_after_many_cycles(memory):
    handles = [memory.allocate(POOL, 128) for _ in range(50)]
    for h in handles:
        memory.release(h)
    assert all(h.released for h in handles)
    with pytest.raises(DoubleReleaseError):
        memory.release(handles[17])
    assert memory.snapshot_stats()[POOL].release_count == 50


def test_reverse_release_keeps_free_list_consistent():
    memory = MemoryManager(initial_block=4 * MIB)
    handles = [memory.allocate(POOL, MIB) for _ in range(4)]
    for h in reversed(handles):
        memory.release(h)
    handles = [memory.allocate(POOL, MIB) for _ in range(4)]
    assert memory.snapshot_stats()[POOL].growth_events == 1
    for h in handles:
        memory.release(h)


def test_coalesce_merges_adjacent_blocks():
    memory = MemoryManager(initial_block=4 * MIB)
    a, b, c = (memory.allocate(POOL, MIB) for _ in range(3))
    memory.release(a)
    memory.release(b)
    assert memory.coalesce(POOL) == 0
    sizes = sorted(size for _, _, size in memory.free_blocks())
    assert sizes == [MIB, 2 * MIB]
    memory.release(c)
    assert memory.coalesce(POOL) == 4 * MIB
    assert memory.pool_capacity == 0


def test_coalesce_keeps_separated_blocks():
    memory = MemoryManager(initial_block=4 * MIB)
    a, x, b, y = (memory.allocate(POOL, MIB) for _ in range(4))
    memory.release(x)
    memory.release(y)
    assert memory.coalesce() == 0
    assert len(memory.free_blocks()) == 2
    a_view = memory.view(a)
    a_view[:] = 1.0
    assert memory.view(a).sum() == a_view.size
    memory.release(a)
    memory.release(b)


def test_coalesce_fully_used_pool_reclaims_nothing():
    memory = MemoryManager(initial_block=MIB)
    h = memory.allocate(POOL, MIB)
    assert memory.coalesce() == 0
    memory.release(h)


def test_non_overlapping_lifetimes_share_space(memory):
    size = 3 * MIB
    for _ in range(4):
        with memory.temporary(size // 8) as first:
            first[:] = 1.0
        with memory.temporary(size // 8) as second:
            assert not second.any()
    stats = memory.snapshot_stats()[POOL]
    assert stats.peak_bytes <= size + memory.alignment
    assert stats.current_bytes == 0


def test_capacity_limit_raises_typed_error():
    memory = MemoryManager(initial_block=MIB, capacity_limit=2 * MIB)
    memory.allocate(POOL, MIB)
    memory.allocate(POOL, MIB)
    with pytest.raises(PoolOutOfMemoryError) as info:
        memory.allocate(POOL, MIB)
    assert info.value.requested == MIB
    assert info.value.stats[POOL].current_bytes == 2 * MIB


def test_shutdown_reports_leaks():
    memory = MemoryManager()
    memory.allocate(ArenaKind.PERMANENT, 8)
    report = memory.shutdown()
    assert len(report.permanent) == 1
    assert not report.clean

    memory.allocate(POOL, 8)
    with pytest.raises(LeakError):
        memory.shutdown()


def test_concurrent_allocations_are_serialized(memory):
    def worker():
        for _ in range(50):
            with memory.temporary(128) as buf:
                buf[:] = 1.0

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stats = memory.snapshot_stats()[POOL]
    assert stats.allocation_count == stats.release_count == 200
    assert stats.current_bytes == 0


def test_thread_local_footprint():
    assert thread_local_footprint(1024, 2048, 80) == 167_772_160
    assert thread_local_footprint(1, 1, 1) == 1
    with pytest.raises(ConfigError):
        thread_local_footprint(0, 2048, 80)
    with pytest.raises(OverflowError):
        thread_local_footprint(2**40, 2**20, 2**10)


def test_invalid_requests(memory):
    with pytest.raises(ConfigError):
        memory.allocate(POOL, 0)
    with pytest.raises(ConfigError):
        MemoryManager(alignment=48)

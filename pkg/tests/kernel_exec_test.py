import threading

import numpy as np
import pytest

from ale_minihydro.exceptions import ConfigError
from ale_minihydro.kernel_exec import (
    ExecPlace,
    GridConfig,
    KernelLaunchError,
    ScratchOverflowError,
    TeamScratch,
    for_each_batch,
    forall,
    launch,
    reduce,
    team_loop,
    thread_loop_2d,
)
from ale_minihydro.parameters import ExecKind, ReduceOp


def test_parse_exec_place():
    assert ExecPlace.parse("seq") == ExecPlace.sequential()
    threaded = ExecPlace.parse("threads:8")
    assert threaded.kind == ExecKind.THREADED
    assert threaded.worker_count == 8
    assert str(threaded) == "threads:8"


@pytest.mark.parametrize("text", ["threads", "threads:x", "gpu", "threads:0"])
def test_parse_exec_place_rejects(text):
    with pytest.raises(ConfigError):
        ExecPlace.parse(text)


@pytest.mark.parametrize("grid", [dict(teams=0), dict(teams=2, thread_dims=(0,)), dict(teams=1, thread_dims=())])
def test_grid_rejects_empty_dimensions(grid):
    with pytest.raises(ConfigError):
        GridConfig(**grid)


def test_launch_writes_team_index(place):
    out = np.full(4, -1)

    def kernel(ctx):
        out[ctx.team] = ctx.team

    launch(place, GridConfig(teams=4), kernel)
    np.testing.assert_array_equal(out, [0, 1, 2, 3])


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_team_loop_partitions_range(place, factor):
    teams = 5
    owner = np.full(factor * teams, -1)
    lock = threading.Lock()
    calls = []

    def kernel(ctx):
        def body(i):
            with lock:
                calls.append(i)
            owner[i] = ctx.team

        team_loop(ctx, range(factor * teams), body)

    launch(place, GridConfig(teams=teams), kernel)
    assert sorted(calls) == list(range(factor * teams))
    np.testing.assert_array_equal(np.bincount(owner, minlength=teams), [factor] * teams)


def test_team_loop_empty_range(place):
    calls = []
    launch(place, GridConfig(teams=3), lambda ctx: team_loop(ctx, range(0), calls.append))
    assert calls == []


def test_thread_loop_2d_covers_each_pair_once():
    visits = np.zeros((3, 5), dtype=int)

    def kernel(ctx):
        def body(i, j):
            visits[i, j] += 1

        thread_loop_2d(ctx, (3, 5), body)

    launch(ExecPlace.threaded(2), GridConfig(teams=1, thread_dims=(3, 5)), kernel)
    np.testing.assert_array_equal(visits, 1)


def test_shared_tile_load(place, rng):
    ne, d1d, q1d = 6, 3, 4
    source = rng.standard_normal((ne, d1d, q1d))
    copies = np.zeros_like(source)

    def kernel(ctx):
        def per_element(e):
            tile = ctx.scratch((d1d, q1d))

            def load(d, q):
                tile[d, q] = source[e, d, q]

            thread_loop_2d(ctx, (d1d, q1d), load)
            ctx.team_sync()
            copies[e] = tile

        team_loop(ctx, range(ne), per_element)

    launch(place, GridConfig(teams=ne, thread_dims=(q1d, q1d)), kernel)
    np.testing.assert_array_equal(copies, source)


def test_scratch_is_private_to_each_team(place):
    teams = 8
    seen = np.zeros(teams)

    def kernel(ctx):
        buf = ctx.scratch(16)
        assert not buf.any()
        buf[:] = ctx.team + 1
        ctx.team_sync()
        seen[ctx.team] = buf.mean()

    launch(place, GridConfig(teams=teams), kernel)
    np.testing.assert_array_equal(seen, np.arange(1, teams + 1))


def test_scratch_region_is_allocated_on_first_use():
    scratch = TeamScratch(48 * 1024)
    assert not scratch.allocated
    assert scratch.used == 0
    first = scratch.alloc(4)
    assert scratch.allocated
    assert scratch.used == 32
    second = scratch.alloc((2, 3), np.int32)
    assert not second.any()
    first[:] = 1.0
    assert not second.any()

    untouched = []
    launch(ExecPlace.sequential(), GridConfig(teams=3), lambda ctx: untouched.append(ctx._scratch.allocated))
    assert untouched == [False, False, False]


def test_scratch_overflow():
    def kernel(ctx):
        ctx.scratch(1024)

    with pytest.raises(KernelLaunchError) as info:
        launch(ExecPlace.sequential(), GridConfig(teams=1), kernel, shared_bytes=512)
    assert isinstance(info.value.__cause__, ScratchOverflowError)

    with pytest.raises(ScratchOverflowError):
        launch(ExecPlace.sequential(), GridConfig(teams=1), kernel, shared_bytes=1 << 20)


def test_kernel_failure_reports_team(place):
    def kernel(ctx):
        if ctx.team == 2:
            raise ValueError("boom")

    with pytest.raises(KernelLaunchError) as info:
        launch(place, GridConfig(teams=4), kernel)
    assert info.value.team == 2


def test_forall_and_batches_cover_range(place):
    counts = np.zeros(1000, dtype=int)

    def body(i):
        counts[i] += 1

    forall(place, 1000, body)
    np.testing.assert_array_equal(counts, 1)

    hits = np.zeros(130, dtype=int)

    def batch_body(s):
        hits[s] += 1

    for_each_batch(place, 130, batch_body, batch=32)
    np.testing.assert_array_equal(hits, 1)


def test_reduce_identities():
    seq = ExecPlace.sequential()
    assert reduce(seq, range(0), ReduceOp.SUM, lambda i: i) == 0.0
    assert reduce(seq, range(0), ReduceOp.MIN, lambda i: i) == np.inf
    assert reduce(seq, range(0), ReduceOp.MAX, lambda i: i) == -np.inf


def test_reduce_values(place):
    assert reduce(place, range(10), "sum", lambda i: i) == 45.0
    assert reduce(place, range(10), "min", lambda i: i - 5) == -5.0
    assert reduce(place, range(10), "max", lambda i: i * i) == 81.0


def test_reduce_is_backend_independent():
    ones = reduce(ExecPlace.sequential(), range(10**6), "sum", lambda i: np.ones(i.shape))
    threaded = reduce(ExecPlace.threaded(8), range(10**6), "sum", lambda i: np.ones(i.shape))
    assert ones == threaded == 1e6

    seq = reduce(ExecPlace.sequential(), range(50_000), "sum", lambda i: np.sin(i))
    par = reduce(ExecPlace.threaded(8), range(50_000), "sum", lambda i: np.sin(i))
    assert seq == par

"""Benchmark suites: assembly complexity, throughput and thread scaling"""

import csv
import logging
from collections.abc import Iterable
from pathlib import Path

import numpy as np

from ale_minihydro.driver import run_ale
from ale_minihydro.kernel_exec import ExecPlace
from ale_minihydro.mesh_fespace import cartesian_mesh, compute_geometric_factors
from ale_minihydro.models import (
    ComplexityRow,
    ComplexitySlopes,
    RunConfig,
    ScalingRow,
    StorageExample,
    ThroughputRecord,
)
from ale_minihydro.pa_operators import mass_setup
from ale_minihydro.parameters import Phase, PresetName, TmopMode
from ale_minihydro.tensor_basis import count_flops, lobatto_basis

logger = logging.getLogger(__name__)

THROUGHPUT_FIELDS = ["phase", "p", "dofs", "cycles", "seconds", "dof_per_s"]


def complexity_row(d: int, p: int) -> ComplexityRow:
    """Counts for the mass operator on one element with Q1D = D1D = p + 1"""
    n = p + 1
    mesh = cartesian_mesh(d, (1.0,) * d, (1,) * d, p)
    basis = lobatto_basis(p, n)
    geom = compute_geometric_factors(mesh, basis.quad)
    with count_flops() as setup:
        op = mass_setup(mesh.h1, basis, geom)
    with count_flops() as apply:
        op.mult(np.ones(mesh.nnodes))
    fa_values = op.element_matrices().size
    return ComplexityRow(
        d=d,
        p=p,
        n=n,
        pa_storage=op.stored_values,
        fa_storage=fa_values,
        pa_setup_flops=setup.count,
        pa_apply_flops=apply.count,
        fa_apply_flops=fa_values,
    )


def _slope(n: np.ndarray, values: list[int]) -> float:
    return float(np.polyfit(np.log(n), np.log(np.asarray(values, dtype=np.float64)), 1)[0])


def bench_complexity(
    orders: Iterable[int] = (1, 2, 3, 4), dims: Iterable[int] = (2, 3)
) -> tuple[list[ComplexityRow], list[ComplexitySlopes]]:
    """Stored values and counted FLOPs per element, with log-log slopes against ``n = p + 1``"""
    rows, slopes = [], []
    for d in dims:
        block = [complexity_row(d, p) for p in orders]
        n = np.array([r.n for r in block], dtype=np.float64)
        slopes.append(
            ComplexitySlopes(
                d=d,
                pa_storage=_slope(n, [r.pa_storage for r in block]),
                pa_setup=_slope(n, [r.pa_setup_flops for r in block]),
                pa_apply=_slope(n, [r.pa_apply_flops for r in block]),
                fa_storage=_slope(n, [r.fa_storage for r in block]),
                expected_pa_storage=d,
                expected_pa_apply=d + 1,
                expected_fa_storage=2 * d,
            )
        )
        rows.extend(block)
    for s in slopes:
        logger.info(
            f"d={s.d}: PA storage slope {s.pa_storage:.2f} (O(p^{s.expected_pa_storage})), "
            f"PA apply {s.pa_apply:.2f} (O(p^{s.expected_pa_apply})), "
            f"FA storage {s.fa_storage:.2f} (O(p^{s.expected_fa_storage}))"
        )
    return rows, slopes


def worked_example(d: int = 3, p: int = 3, per_axis: int = 10) -> list[StorageExample]:
    """Full vs partial assembly storage on ``per_axis**d`` elements in two conventions.

    The order convention counts ``p^{2d}`` full-assembly and ``p^d`` partial
    assembly values per element. The node convention counts ``(p+1)^{2d}``
    matrix entries against the ``Q1D^d`` quadrature values actually stored by
    the mass operator, with ``Q1D = p + 2``.
    """
    ne = per_axis**d
    mesh = cartesian_mesh(d, (1.0,) * d, (per_axis,) * d, p)
    basis = lobatto_basis(p, p + 2)
    stored = mass_setup(mesh.h1, basis, compute_geometric_factors(mesh, basis.quad)).stored_values
    examples = [
        StorageExample(convention="order", d=d, p=p, elements=ne, fa_values=ne * p ** (2 * d), pa_values=ne * p**d),
        StorageExample(
            convention="nodes", d=d, p=p, elements=ne, fa_values=ne * (p + 1) ** (2 * d), pa_values=stored
        ),
    ]
    for ex in examples:
        logger.info(
            f"{ex.convention} convention: full assembly {ex.fa_values:,} values, "
            f"partial assembly {ex.pa_values:,} values ({ex.ratio:.1f}x)"
        )
    return examples


def _phase_record(phase: Phase, p: int, dofs: int, count: int, seconds: float) -> ThroughputRecord | None:
    if count == 0 or seconds <= 0:
        return None
    return ThroughputRecord(
        phase=phase, p=p, dofs=dofs, cycles=count, seconds=seconds, dof_per_s=dofs * count / seconds
    )


def bench_throughput(
    base: RunConfig,
    orders: Iterable[int] = (1, 2, 3),
    sizes: Iterable[int] = (2, 4, 8),
    csv_path: str | Path | None = None,
) -> list[ThroughputRecord]:
    """Per-phase DOF throughput over an order x mesh-size grid.

    ``sizes`` are elements per axis; one mesh optimization and remap runs at
    the last cycle when the base configuration enables ALE.
    """
    records: list[ThroughputRecord] = []
    for p in orders:
        for n in sizes:
            dim = 3 if base.preset == PresetName.TRIPLE_PT_3D else 2
            config = base.model_copy(
                update={"order": p, "elements": [n] * dim, "remap_every": max(base.cycles, 1)}
            )
            result = run_ale(config)
            hydro = result.hydro
            dofs = hydro.kinematic.vsize + hydro.thermo.vsize
            cycles = len(result.cycles)
            timings = result.timings
            for phase, count in [
                (Phase.LAGRANGE, cycles),
                (Phase.MESHOPT, len(result.tmop)),
                (Phase.REMAP, len(result.remaps)),
                (Phase.TOTAL, cycles),
            ]:
                record = _phase_record(phase, p, dofs, count, timings[phase])
                if record is not None:
                    records.append(record)
            logger.info(f"throughput p={p} n={n}: {dofs} dofs, {cycles} cycles in {timings[Phase.TOTAL]:.3f}s")
    if csv_path is not None:
        write_csv(csv_path, records)
    return records


def write_csv(path: str | Path, records: list[ThroughputRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=THROUGHPUT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record.model_dump(mode="json"))
    return path


def bench_strong_scaling(base: RunConfig, workers: Iterable[int] = (1, 2, 4)) -> list[ScalingRow]:
    """Lagrange-phase time per cycle on a fixed problem against worker count"""
    lagrange_only = base.model_copy(update={"tmop": base.tmop.model_copy(update={"mode": TmopMode.OFF})})
    rows: list[ScalingRow] = []
    baseline = None
    for w in workers:
        config = lagrange_only.model_copy(update={"exec_place": str(ExecPlace.threaded(w))})
        result = run_ale(config)
        per_cycle = result.timings[Phase.LAGRANGE] / max(len(result.cycles), 1)
        if baseline is None:
            baseline = (w, per_cycle)
        w0, t0 = baseline
        rows.append(ScalingRow(workers=w, seconds_per_cycle=per_cycle, efficiency=(w0 * t0) / (w * per_cycle)))
        logger.info(f"{w} workers: {per_cycle:.4e} s/cycle, efficiency {rows[-1].efficiency:.2f}")
    return rows

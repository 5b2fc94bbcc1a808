import csv

import pytest

from ale_minihydro.bench import (
    THROUGHPUT_FIELDS,
    bench_complexity,
    bench_strong_scaling,
    bench_throughput,
    complexity_row,
    worked_example,
    write_csv,
)
from ale_minihydro.models import RunConfig, ThroughputRecord
from ale_minihydro.parameters import Phase


def test_complexity_row_counts():
    row = complexity_row(2, 1)
    assert row.n == 2
    assert row.pa_storage == 4
    assert row.fa_storage == 16
    assert row.fa_apply_flops == row.fa_storage
    assert 0 < row.pa_setup_flops
    assert 0 < row.pa_apply_flops


def test_complexity_slopes():
    rows, slopes = bench_complexity()
    assert len(rows) == 8
    for s in slopes:
        assert s.pa_storage == pytest.approx(s.expected_pa_storage, rel=0.1)
        assert s.pa_setup == pytest.approx(s.expected_pa_storage, rel=0.1)
        assert s.pa_apply == pytest.approx(s.expected_pa_apply, rel=0.1)
        assert s.fa_storage == pytest.approx(s.expected_fa_storage, rel=0.1)


def test_worked_example():
    order, nodes = worked_example()
    assert (order.fa_values, order.pa_values) == (729_000, 27_000)
    assert (nodes.fa_values, nodes.pa_values) == (4_096_000, 125_000)
    assert order.ratio >= 20
    assert nodes.ratio >= 20


def test_throughput_csv_schema(tmp_path):
    records = [
        ThroughputRecord(phase=Phase.LAGRANGE, p=2, dofs=100, cycles=3, seconds=0.5, dof_per_s=600.0),
        ThroughputRecord(phase=Phase.TOTAL, p=2, dofs=100, cycles=3, seconds=0.75, dof_per_s=400.0),
    ]
    path = write_csv(tmp_path / "bench" / "throughput.csv", records)
    with path.open() as f:
        reader = csv.DictReader(f)
        assert reader.fieldnames == THROUGHPUT_FIELDS
        rows = list(reader)
    assert [r["phase"] for r in rows] == ["lagrange", "total"]
    assert float(rows[0]["dof_per_s"]) == 600.0


@pytest.mark.slow
def test_throughput_records_every_order(tmp_path):
    base = RunConfig.model_validate({"preset": "taylor-green", "cycles": 3, "tmop": {"mode": "off"}})
    records = bench_throughput(base, orders=(1, 3), sizes=(4,), csv_path=tmp_path / "t.csv")
    lagrange = {r.p: r.dof_per_s for r in records if r.phase == Phase.LAGRANGE}
    assert set(lagrange) == {1, 3}
    assert all(rate > 0 for rate in lagrange.values())
    assert (tmp_path / "t.csv").exists()


@pytest.mark.slow
def test_strong_scaling_rows():
    base = RunConfig.model_validate({"preset": "taylor-green", "elements": [8, 8], "cycles": 2})
    rows = bench_strong_scaling(base, workers=(1, 2))
    assert [r.workers for r in rows] == [1, 2]
    assert rows[0].efficiency == pytest.approx(1.0)

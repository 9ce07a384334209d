import hashlib
import logging

import numpy as np
import pytest

from lynx.config import settings
from lynx.exceptions import ConfigurationError
from lynx.models.bench_models import BenchCase, BenchRow
from lynx.models.sparsity_models import NMPattern
from lynx.services import bench
from lynx.services.spmm import fused_sparse_linear


@pytest.fixture
def no_timer_floor(monkeypatch):
    monkeypatch.setattr(settings, "min_timed_ns", 0)


def _tiny_case(**kwargs):
    return BenchCase(m=32, n=24, k=64, repeats=3, warmup=0, lora_rank=8, **kwargs)


def test_default_cases():
    qwen = bench.default_cases("qwen-shapes", scale=4)
    assert [case.label for case in qwen] == ["1024x1024x768", "1024x1024x3072"]
    grid = bench.default_cases("table-grid", scale=4, repeats=7)
    assert len(grid) == 6
    assert {case.k for case in grid} == {768, 3072}
    assert {case.m for case in grid} == {512, 1024, 2048}
    assert all(case.repeats == 7 for case in grid)
    assert [case.label for case in bench.default_cases("acceptance", scale=8)] == ["1024x1024x3072"]


def test_default_cases_errors():
    with pytest.raises(ConfigurationError):
        bench.default_cases("gpu-grid")
    with pytest.raises(ConfigurationError):
        bench.default_cases(scale=0)
    with pytest.raises(ConfigurationError):
        BenchCase.build(m=8, n=8, k=8, repeats=2)
    with pytest.raises(ConfigurationError):
        BenchCase.build(m=8, n=8, k=6)


def test_run_case_reports_consistent_row(no_timer_floor):
    case = _tiny_case()
    row = bench.run_case(case)
    assert row.madd_ratio == 0.5
    assert row.repeats_used == 3
    assert 0.0 <= row.sparse_cost_pct <= 100.0
    assert 0.0 <= row.staged_sparse_cost_pct <= 100.0
    assert row.speedup == pytest.approx(row.dense_ns / row.fused_sparse_ns)
    assert min(row.dense_ns, row.staged_sparse_ns, row.fused_sparse_ns, row.fused_lora_ns) > 0


def test_bench_does_not_alter_outputs(no_timer_floor):
    case = _tiny_case()
    row = bench.run_case(case)
    x, w, _, _ = bench._case_inputs(case)
    y, _ = fused_sparse_linear(x, w, case.pattern, case.granularity)
    assert row.checksum == hashlib.sha256(np.ascontiguousarray(y, dtype="<f4").tobytes()).hexdigest()


@pytest.mark.parametrize("pattern", [NMPattern(n=1, m=2), NMPattern(n=4, m=8), NMPattern(n=1, m=4)])
def test_madd_ratio_is_structural(no_timer_floor, pattern):
    row = bench.run_case(_tiny_case(pattern=pattern))
    assert row.madd_ratio == pattern.n / pattern.m


def test_repeats_increase_below_timer_floor(monkeypatch, caplog):
    monkeypatch.setattr(settings, "min_timed_ns", 10 ** 15)
    monkeypatch.setattr(settings, "max_repeats", 12)
    with caplog.at_level(logging.WARNING, logger="lynx.services.bench"):
        row = bench.run_case(_tiny_case())
    assert row.repeats_used == 12
    assert any("timer floor" in message for message in caplog.messages)


def _row(dense, staged, fused, fused_cost, staged_cost):
    return BenchRow(
        case=_tiny_case(),
        dense_ns=dense,
        staged_sparse_ns=staged,
        fused_sparse_ns=fused,
        fused_lora_ns=fused,
        staged_sparse_cost_pct=staged_cost,
        sparse_cost_pct=fused_cost,
        speedup=dense / fused,
        madd_ratio=0.5,
        repeats_used=3,
    )


def test_soft_criteria_are_reported_not_raised():
    good = _row(1000, 900, 800, 5.0, 20.0)
    slow = _row(1000, 700, 800, 25.0, 20.0)
    assert bench.soft_criteria([good]) == []
    failures = bench.soft_criteria([good, slow])
    assert len(failures) == 3
    assert all(failure.startswith("32x24x64") for failure in failures)


def test_soft_targets_log_the_measured_table(caplog):
    sluggish = _row(1000, 990, 900, 5.0, 20.0)
    costly = _row(1000, 900, 500, 18.0, 20.0)
    with caplog.at_level(logging.WARNING, logger="lynx.services.bench"):
        failures = bench.soft_criteria([sluggish, costly])
    assert len(failures) == 2
    assert "speedup 1.11x below 1.2x" in failures[0]
    assert "above 15%" in failures[1]
    assert any(",".join(bench.CSV_COLUMNS) in message for message in caplog.messages)


def test_soft_targets_pass_silently(caplog):
    with caplog.at_level(logging.WARNING, logger="lynx.services.bench"):
        assert bench.soft_criteria([_row(1000, 900, 800, 15.0, 20.0)]) == []
    assert not caplog.messages


def test_report_and_csv(no_timer_floor):
    rows = bench.run_bench([_tiny_case()])
    report = bench.bench_report(rows, threads=1)
    assert report.mode == "single-threaded"
    assert report.environment["threads"] == 1
    assert "numba" in report.environment
    assert "CPU wall-clock" in report.header
    assert bench.bench_report(rows, threads=4).mode == "multi-threaded (4)"

    lines = bench.rows_to_csv(rows).strip().split("\n")
    assert lines[0] == ",".join(bench.CSV_COLUMNS)
    assert lines[1].startswith("32x24x64,")


def test_run_bench_needs_cases():
    with pytest.raises(ConfigurationError):
        bench.run_bench([])

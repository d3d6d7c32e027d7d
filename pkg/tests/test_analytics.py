import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.append(str(PROJECT_ROOT))

from utils import analytics as an  # noqa: E402
from utils.errors import ComparisonError  # noqa: E402
from utils.measurement import MeasurementSet, RunConfig  # noqa: E402
from utils.reports import render_breakdown_markdown, render_comparison_markdown  # noqa: E402
from utils.trace_analysis import Decomposition  # noqa: E402
from utils.workloads import ExitClass, RunResult  # noqa: E402


def _measurement(workload, wall_time, cpu=1000.0, gpu=0.0, mode="eval", device="gpu", runs=None):
    runs = runs or [wall_time]
    return MeasurementSet(
        workload=workload,
        config=RunConfig(mode=mode, device=device, batch_size=8, repeats=max(1, len(runs))),
        runs=tuple(
            RunResult(exit_class=ExitClass.OK, wall_time=int(t), peak_cpu_mem=int(cpu),
                      peak_gpu_mem=int(gpu), post_run_resident_mem=0)
            for t in runs
        ),
        selected_index=0,
        aggregate={"wall_time": wall_time, "peak_cpu_mem": cpu, "peak_gpu_mem": gpu, "post_run_resident_mem": 0.0},
    )


def _decomposition(active, movement, idle):
    return Decomposition(active_fraction=active, movement_fraction=movement, idle_fraction=idle)


# ---------------------------------------------------------------------------
# Ratio algebra
# ---------------------------------------------------------------------------

def test_geomean_reciprocal_pair():
    assert an.geomean([2.0, 0.5]) == pytest.approx(1.0, rel=1e-12)


def test_geomean_cube_root():
    assert an.geomean([1.2, 1.5, 1.3]) == pytest.approx(1.3277, abs=1e-3)


@pytest.mark.parametrize("values", [[], [1.0, 0.0], [2.0, -1.0]])
def test_geomean_rejects_bad_input(values):
    with pytest.raises(ValueError):
        an.geomean(values)


def test_geomean_does_not_overflow():
    assert an.geomean([1e300, 1e300, 1e300]) == pytest.approx(1e300, rel=1e-9)


def test_speedup_ratio_orientation():
    assert an.speedup_ratio(100, 100) == 1.0
    assert an.speedup_ratio(50, 100) == 0.5


def test_speedup_ratio_rejects_zero_denominator():
    with pytest.raises(ValueError):
        an.speedup_ratio(100, 0)


def test_ratio_algebra_over_random_inputs():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        a = rng.uniform(0.01, 1000.0, size=n)
        b = rng.uniform(0.01, 1000.0, size=n)
        c = float(rng.uniform(0.01, 100.0))

        assert an.speedup_ratio(a[0], b[0]) * an.speedup_ratio(b[0], a[0]) == pytest.approx(1.0, rel=1e-12)
        assert an.geomean(a * c) == pytest.approx(c * an.geomean(a), rel=1e-12)
        assert an.geomean(a / b) == pytest.approx(an.geomean(a) / an.geomean(b), rel=1e-9)


@pytest.mark.parametrize(
    "ratio,rendered",
    [(0.288, "−71.2%"), (1.12, "+12.0%"), (1.0, "0.0%"), (0.5, "−50.0%")],
)
def test_format_percent_change(ratio, rendered):
    assert an.format_percent_change(ratio) == rendered


# ---------------------------------------------------------------------------
# Variant and platform comparisons
# ---------------------------------------------------------------------------

def test_identical_variants_have_unit_ratios():
    sets = [_measurement("a", 100.0, gpu=50.0), _measurement("b", 200.0, gpu=70.0)]

    comparison = an.compare_variants(sets, sets)

    assert all(row.wall_time == 1.0 for row in comparison.rows)
    assert comparison.geomeans == {"wall_time": 1.0, "peak_cpu_mem": 1.0, "peak_gpu_mem": 1.0}
    assert comparison.coverage == ()


def test_cpu_memory_reduction_rendering():
    comparison = an.compare_variants(
        [_measurement("a", 100.0, cpu=100000.0)],
        [_measurement("a", 100.0, cpu=28800.0)],
        "eager", "compiled",
    )

    assert comparison.rows[0].peak_cpu_mem == pytest.approx(0.288)
    assert comparison.percent_changes()[0]["peak_cpu_mem"] == "−71.2%"
    assert "−71.2%" in render_comparison_markdown(comparison)


def test_workload_on_one_side_only_is_listed_under_coverage():
    baseline = [_measurement("a", 100.0), _measurement("w", 100.0)]
    candidate = [_measurement("a", 50.0)]

    comparison = an.compare_variants(baseline, candidate)

    assert comparison.coverage == ("w",)
    assert [row.workload for row in comparison.rows] == ["a"]
    assert comparison.geomeans["wall_time"] == pytest.approx(0.5)


def test_zero_gpu_memory_gives_no_gpu_ratio():
    comparison = an.compare_variants([_measurement("a", 100.0, device="cpu")],
                                     [_measurement("a", 90.0, device="cpu")])

    assert comparison.rows[0].peak_gpu_mem is None
    assert comparison.geomeans["peak_gpu_mem"] is None


def test_empty_join_is_a_comparison_error():
    with pytest.raises(ComparisonError, match="no common workloads"):
        an.compare_variants([_measurement("a", 1.0)], [_measurement("b", 1.0)])


def test_speedup_summary_is_arithmetic_mean_of_run_ratios():
    baseline = _measurement("a", 100.0, runs=[100, 200])
    candidate = _measurement("a", 50.0, runs=[50, 50])

    # (100/50 + 200/50) / 2
    assert an.speedup_summary(baseline, candidate) == pytest.approx(3.0)


def test_platform_comparison_geomean_per_mode():
    a = [_measurement("x", 50.0, mode="train"), _measurement("y", 200.0, mode="train"),
         _measurement("x", 30.0, mode="eval")]
    b = [_measurement("x", 100.0, mode="train"), _measurement("y", 100.0, mode="train"),
         _measurement("x", 60.0, mode="eval")]

    comparison = an.compare_platforms(a, b, "A100", "MI210")

    assert comparison.geomean_by_mode["train"] == pytest.approx(1.0)
    assert comparison.geomean_by_mode["eval"] == pytest.approx(0.5)
    assert "T_A100 / T_MI210" in comparison.orientation


def test_platform_comparison_ignores_other_device():
    with pytest.raises(ComparisonError):
        an.compare_platforms([_measurement("x", 1.0, device="cpu")], [_measurement("x", 1.0, device="cpu")],
                             "A", "B")


# ---------------------------------------------------------------------------
# Breakdown table
# ---------------------------------------------------------------------------

def test_breakdown_all_idle():
    table = an.breakdown_report([("w", "cv", "train", _decomposition(0.0, 0.0, 1.0))])

    row = table.rows[0]
    assert (row.active_pct, row.movement_pct, row.idle_pct) == (0.0, 0.0, 100.0)


def test_breakdown_worked_example():
    table = an.breakdown_report([("w", "cv", "train", _decomposition(0.5, 0.2, 0.3))])

    row = table.rows[0]
    assert (row.active_pct, row.movement_pct, row.idle_pct) == (50.0, 20.0, 30.0)


def test_breakdown_reference_row_layout():
    table = an.breakdown_report([("resnet", "Computer Vision", "train", _decomposition(0.531, 0.021, 0.448))])

    table.check_row_sums()
    markdown = render_breakdown_markdown(table)
    frame = table.to_frame()

    assert list(frame.columns) == ["Domain", "Mode", "GPU Activeness (%)", "Data Movement (%)", "GPU Idleness (%)"]
    assert frame.iloc[0].tolist() == ["Computer Vision", "train", 53.1, 2.1, 44.8]
    assert "| Computer Vision | train" in markdown
    assert "53.1" in markdown and "2.1" in markdown and "44.8" in markdown


def test_breakdown_averages_per_domain_and_mode():
    table = an.breakdown_report([
        ("a", "nlp", "eval", _decomposition(0.2, 0.1, 0.7)),
        ("b", "nlp", "eval", _decomposition(0.4, 0.3, 0.3)),
        ("c", "nlp", "train", _decomposition(0.9, 0.0, 0.1)),
    ])

    rows = {(r.domain, r.mode): r for r in table.rows}
    assert (rows[("nlp", "eval")].active_pct, rows[("nlp", "eval")].movement_pct) == (30.0, 20.0)
    assert rows[("nlp", "eval")].workloads == 2
    assert len(table.workload_rows) == 3


def test_breakdown_rows_always_sum_to_100():
    rng = np.random.default_rng(9)
    entries = []
    for i in range(60):
        weights = rng.dirichlet([1.0, 1.0, 1.0])
        weights[2] = 1.0 - weights[0] - weights[1]
        entries.append((f"w{i}", f"d{i % 4}", ["train", "eval"][i % 2],
                        _decomposition(float(weights[0]), float(weights[1]), max(0.0, float(weights[2])))))

    table = an.breakdown_report(entries)

    for row in table.rows:
        assert row.total == pytest.approx(100.0, abs=0.1)


def test_round_percentages_largest_remainder():
    assert an.round_percentages([1 / 3, 1 / 3, 1 / 3]) == [33.4, 33.3, 33.3]
    assert sum(an.round_percentages([0.12345, 0.54321, 0.33334])) == pytest.approx(100.0)


def test_breakdown_needs_input():
    with pytest.raises(ValueError):
        an.breakdown_report([])

import json
import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.append(str(PROJECT_ROOT))

from utils import trace_analysis as ta  # noqa: E402
from utils.errors import TraceParseError, TraceValidationError  # noqa: E402

K = ta.EventCategory.KERNEL
H2D = ta.EventCategory.MEMCPY_H2D
D2H = ta.EventCategory.MEMCPY_D2H
D2D = ta.EventCategory.MEMCPY_D2D


def _event(category, start, duration, stream_id=0):
    return ta.TraceEvent(stream_id=stream_id, category=category, start=start, duration=duration)


def _write_trace(path: Path, records) -> Path:
    path.write_text(json.dumps(records))
    return path


def _sampling_oracle(events, wall_time):
    """Classify every microsecond independently; compute wins over movement"""
    active = np.zeros(wall_time, dtype=bool)
    movement = np.zeros(wall_time, dtype=bool)
    for event in events:
        if event.category in ta.ACTIVE_CATEGORIES:
            active[event.start:event.end] = True
        elif event.category in ta.MOVEMENT_CATEGORIES:
            movement[event.start:event.end] = True
    movement &= ~active
    return int(active.sum()), int(movement.sum()), int(wall_time - active.sum() - movement.sum())


def test_parse_empty_array(tmp_path):
    assert ta.parse_trace(_write_trace(tmp_path / "t.json", [])) == []


def test_parse_kernel_and_memcpy(tmp_path):
    path = _write_trace(tmp_path / "t.json", [
        {"ph": "X", "cat": "Kernel", "name": "gemm", "ts": 0, "dur": 100000, "tid": 7},
        {"ph": "X", "cat": "gpu_memcpy", "name": "Memcpy HtoD (Pageable -> Device)",
         "ts": 40000, "dur": 30000, "tid": 8},
    ])

    events = ta.parse_trace(path)

    assert len(events) == 2
    kernel, copy = events
    assert (kernel.category, kernel.start, kernel.duration, kernel.stream_id) == (K, 0, 100000, 7)
    assert kernel.name == "gemm"
    assert (copy.category, copy.start, copy.duration, copy.stream_id) == (H2D, 40000, 30000, 8)


def test_parse_accepts_trace_events_wrapper_and_skips_other_phases(tmp_path):
    path = _write_trace(tmp_path / "t.json", {"traceEvents": [
        {"ph": "M", "name": "process_name"},
        {"ph": "X", "cat": "kernel", "ts": 10, "dur": 5},
        {"ph": "i", "ts": 12},
    ]})

    events = ta.parse_trace(path)

    assert [(e.start, e.duration) for e in events] == [(10, 5)]


def test_parse_negative_duration_names_record(tmp_path):
    path = _write_trace(tmp_path / "t.json", [{"ph": "X", "cat": "kernel", "ts": 0, "dur": "-5"}])

    with pytest.raises(TraceParseError) as excinfo:
        ta.parse_trace(path)

    assert excinfo.value.index == 0
    assert "record 0" in str(excinfo.value)


def test_parse_non_numeric_timestamp_names_record(tmp_path):
    path = _write_trace(tmp_path / "t.json", [
        {"ph": "X", "cat": "kernel", "ts": 0, "dur": 1},
        {"ph": "X", "cat": "kernel", "ts": "soon", "dur": 1},
    ])

    with pytest.raises(TraceParseError) as excinfo:
        ta.parse_trace(path)

    assert excinfo.value.index == 1


def test_parse_rejects_non_object_record(tmp_path):
    path = _write_trace(tmp_path / "t.json", [{"ph": "X", "cat": "kernel", "ts": 0, "dur": 1}, 42])

    with pytest.raises(TraceParseError) as excinfo:
        ta.parse_trace(path)

    assert excinfo.value.index == 1


@pytest.mark.parametrize(
    "cat,name,expected",
    [
        ("kernel", "sgemm", ta.EventCategory.KERNEL),
        ("gpu_memcpy", "Memcpy HtoD", ta.EventCategory.MEMCPY_H2D),
        ("gpu_memcpy", "Memcpy DtoH", ta.EventCategory.MEMCPY_D2H),
        ("gpu_memcpy", "Memcpy DtoD", ta.EventCategory.MEMCPY_D2D),
        ("gpu_memcpy", "Memset", ta.EventCategory.OTHER),
        ("cuda_runtime", "cudaLaunchKernel", ta.EventCategory.OTHER),
    ],
)
def test_classify_event(cat, name, expected):
    assert ta.classify_event(cat, name) == expected


def test_union_of_nothing_is_empty():
    union = ta.union_intervals([])

    assert len(union) == 0
    assert union.total_length == 0


def test_union_merges_overlaps():
    union = ta.union_intervals([_event(K, 0, 30000), _event(K, 20000, 30000)])

    assert union.spans == ((0, 50000),)
    assert union.total_length == 50000


def test_union_filters_by_category():
    events = [_event(K, 0, 10), _event(H2D, 5, 20)]

    assert ta.union_intervals(events, {H2D}).spans == ((5, 25),)


def test_union_matches_sampling_oracle_for_random_intervals():
    rng = np.random.default_rng(2024)
    starts = rng.integers(0, 5000, size=1000)
    lengths = rng.integers(0, 200, size=1000)
    events = [_event(K, int(s), int(d)) for s, d in zip(starts, lengths)]

    covered = np.zeros(5200, dtype=bool)
    for s, d in zip(starts, lengths):
        covered[s:s + d] = True

    union = ta.union_intervals(events)

    assert union.total_length == int(covered.sum())
    # Disjoint, sorted and non-adjacent
    for (_, prev_end), (next_start, _) in zip(union.spans, union.spans[1:]):
        assert prev_end < next_start


def test_union_is_idempotent_order_invariant_and_monotone():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        events = [_event(K, int(rng.integers(0, 2000)), int(rng.integers(0, 150))) for _ in range(200)]
        union = ta.union_intervals(events)

        assert ta.union_intervals(events + events).spans == union.spans
        respans = [_event(K, start, end - start) for start, end in union.spans]
        assert ta.union_intervals(respans).spans == union.spans

        shuffled = [events[i] for i in rng.permutation(len(events))]
        assert ta.union_intervals(shuffled).spans == union.spans

        totals = [ta.union_intervals(events[:n]).total_length for n in range(0, len(events) + 1, 10)]
        assert totals == sorted(totals), f"seed {seed}"


def test_interval_difference():
    a = ta.IntervalSet([(0, 100), (200, 300)])
    b = ta.IntervalSet([(50, 250)])

    assert a.difference(b).spans == ((0, 50), (250, 300))
    assert b.difference(a).spans == ((100, 200),)
    assert a.difference(ta.IntervalSet()).spans == a.spans


def test_decompose_no_events_is_all_idle():
    d = ta.decompose([], 100000)

    assert d.as_tuple() == (0.0, 0.0, 1.0)


def test_decompose_full_span_kernel_is_all_active():
    d = ta.decompose([_event(K, 0, 100000)], 100000)

    assert d.as_tuple() == (1.0, 0.0, 0.0)


def test_decompose_compute_priority_example():
    events = [_event(K, 0, 30000), _event(K, 20000, 30000), _event(H2D, 40000, 30000)]

    d = ta.decompose(events, 100000)

    assert d.as_tuple() == (0.5, 0.2, 0.3)
    assert (d.active_us, d.movement_us, d.idle_us) == (50000, 20000, 30000)
    assert d.denominator_wall_time == 100000


def test_decompose_counts_device_copies_as_active():
    d = ta.decompose([_event(D2D, 0, 25), _event(D2H, 10, 50)], 100)

    assert d.as_tuple() == (0.25, 0.35, 0.4)


def test_decompose_rejects_event_past_wall_time():
    with pytest.raises(TraceValidationError):
        ta.decompose([_event(K, 90, 20)], 100)


@pytest.mark.parametrize("wall_time", [0, -10])
def test_decompose_rejects_non_positive_wall_time(wall_time):
    with pytest.raises(TraceValidationError):
        ta.decompose([], wall_time)


def test_decompose_matches_sampling_oracle_on_random_traces():
    categories = [K, H2D, D2H, D2D, ta.EventCategory.OTHER]
    for seed in range(200):
        rng = np.random.default_rng(seed)
        wall_time = int(rng.integers(50, 3000))
        events = []
        for _ in range(int(rng.integers(0, 1001))):
            start = int(rng.integers(0, wall_time))
            duration = int(rng.integers(0, wall_time - start + 1))
            category = categories[int(rng.integers(0, len(categories)))]
            events.append(_event(category, start, duration, stream_id=int(rng.integers(0, 4))))

        d = ta.decompose(events, wall_time)
        active, movement, idle = _sampling_oracle(events, wall_time)

        assert (d.active_us, d.movement_us, d.idle_us) == (active, movement, idle), f"seed {seed}"
        assert sum(d.as_tuple()) == pytest.approx(1.0, abs=1e-9)


def test_duplicating_events_onto_another_stream_changes_nothing():
    rng = np.random.default_rng(7)
    events = []
    for _ in range(25):
        start = int(rng.integers(0, 900))
        events.append(_event([K, H2D, D2H][int(rng.integers(0, 3))], start, int(rng.integers(0, 100))))
    copies = [e.model_copy(update={"stream_id": e.stream_id + 100}) for e in events]

    assert ta.decompose(events + copies, 1000) == ta.decompose(events, 1000)


def test_decompose_file_reads_trace(tmp_path):
    path = _write_trace(tmp_path / "t.json", [
        {"ph": "X", "cat": "kernel", "ts": 0, "dur": 30000},
        {"ph": "X", "cat": "kernel", "ts": 20000, "dur": 30000},
        {"ph": "X", "cat": "gpu_memcpy", "name": "Memcpy HtoD", "ts": 40000, "dur": 30000},
    ])

    summary = ta.decomposition_summary(ta.decompose_file(path, 100000))

    assert (summary["active_pct"], summary["movement_pct"], summary["idle_pct"]) == (50.0, 20.0, 30.0)

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.append(str(PROJECT_ROOT))

from utils.errors import TraceValidationError  # noqa: E402
from utils.trace_analysis import Decomposition, decompose_file, parse_trace  # noqa: E402
from utils.trace_synthesis import build_synthetic_events, emit_synthetic_trace  # noqa: E402


def _target(active, movement, idle):
    return Decomposition(active_fraction=active, movement_fraction=movement, idle_fraction=idle)


def test_all_active_target_is_one_full_kernel(tmp_path):
    path = emit_synthetic_trace(_target(1.0, 0.0, 0.0), 100000, 1, 0, tmp_path / "t.json")

    events = parse_trace(path)

    assert len(events) == 1
    assert (events[0].category.value, events[0].start, events[0].end) == ("kernel", 0, 100000)


def test_round_trip_documented_target(tmp_path):
    path = emit_synthetic_trace(_target(0.5, 0.2, 0.3), 100000, 12, 1, tmp_path / "t.json")

    d = decompose_file(path, 100000)

    assert d.active_fraction == pytest.approx(0.5, abs=1e-6)
    assert d.movement_fraction == pytest.approx(0.2, abs=1e-6)
    assert d.idle_fraction == pytest.approx(0.3, abs=1e-6)


def test_round_trip_random_targets(tmp_path):
    wall_time = 10_000_000
    for seed in range(100):
        rng = np.random.default_rng(seed)
        weights = rng.integers(0, 1000, size=3)
        if weights.sum() == 0:
            continue
        total = int(weights.sum())
        target = _target(*(int(w) / total for w in weights))
        n_events = int(rng.integers(2, 40))

        path = emit_synthetic_trace(target, wall_time, n_events, seed, tmp_path / f"t{seed}.json")
        d = decompose_file(path, wall_time)

        assert d.active_fraction == pytest.approx(target.active_fraction, abs=1e-6), f"seed {seed}"
        assert d.movement_fraction == pytest.approx(target.movement_fraction, abs=1e-6), f"seed {seed}"
        assert len(parse_trace(path)) == n_events


def test_generation_is_deterministic_per_seed():
    target = _target(0.4, 0.3, 0.3)

    first = build_synthetic_events(target, 50000, 10, seed=3)
    second = build_synthetic_events(target, 50000, 10, seed=3)

    assert first == second


def test_trace_file_uses_trace_events_wrapper(tmp_path):
    path = emit_synthetic_trace(_target(0.3, 0.3, 0.4), 10000, 6, 5, tmp_path / "t.json")

    payload = json.loads(path.read_text())

    assert set(payload) == {"traceEvents"}
    assert all(event["ph"] == "X" for event in payload["traceEvents"])


def test_fractions_not_summing_to_one_are_rejected():
    with pytest.raises(ValidationError):
        _target(0.6, 0.6, -0.2)


def test_movement_without_room_for_a_memcpy_is_infeasible():
    with pytest.raises(TraceValidationError):
        build_synthetic_events(_target(0.5, 0.2, 0.3), 100000, 1, seed=0)


def test_unrepresentable_target_is_rejected():
    with pytest.raises(TraceValidationError):
        build_synthetic_events(_target(1 / 3, 1 / 3, 1 / 3), 10, 3, seed=0)

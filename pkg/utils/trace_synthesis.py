"""
Synthetic trace generator
Writes Chrome-trace files whose decomposition is known in advance. Used by the built-in
workloads to fake a device timeline and by the tests as a decomposition oracle.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import TraceValidationError
from .trace_analysis import Decomposition

logger = logging.getLogger(__name__)

ROUND_TRIP_TOLERANCE = 1e-6

_MEMCPY_NAMES = {
    "h2d": "Memcpy HtoD (Pageable -> Device)",
    "d2h": "Memcpy DtoH (Device -> Pageable)",
}


def _split(total: int, parts: int, rng: np.random.Generator) -> List[int]:
    """Split ``total`` into ``parts`` positive integers (``parts`` <= ``total``)"""
    if parts <= 0:
        return []
    if parts == 1:
        return [total]
    cuts = np.sort(rng.choice(total - 1, size=parts - 1, replace=False) + 1)
    bounds = np.concatenate(([0], cuts, [total]))
    return [int(x) for x in np.diff(bounds)]


def _split_allow_zero(total: int, parts: int, rng: np.random.Generator) -> List[int]:
    """Split ``total`` into ``parts`` non-negative integers"""
    if parts == 1:
        return [total]
    cuts = np.sort(rng.integers(0, total + 1, size=parts - 1))
    bounds = np.concatenate(([0], cuts, [total]))
    return [int(x) for x in np.diff(bounds)]


def quantize_target(target: Decomposition, wall_time: int) -> Tuple[int, int, int]:
    """Integer-microsecond active / movement / idle lengths for ``target``"""
    active_us = int(round(target.active_fraction * wall_time))
    movement_us = int(round(target.movement_fraction * wall_time))
    if active_us + movement_us > wall_time:
        movement_us = wall_time - active_us
    idle_us = wall_time - active_us - movement_us

    for label, length, wanted in (
        ("active", active_us, target.active_fraction),
        ("movement", movement_us, target.movement_fraction),
        ("idle", idle_us, target.idle_fraction),
    ):
        if abs(length / wall_time - wanted) > ROUND_TRIP_TOLERANCE:
            raise TraceValidationError(
                f"{label} fraction {wanted} is not representable in whole microseconds "
                f"over {wall_time} us; use a longer wall_time"
            )
    return active_us, movement_us, idle_us


def build_synthetic_events(
    target: Decomposition,
    wall_time: int,
    n_events: int,
    seed: int,
) -> List[Dict]:
    if wall_time <= 0:
        raise TraceValidationError(f"wall_time must be positive, got {wall_time}")
    if n_events < 1:
        raise TraceValidationError(f"n_events must be >= 1, got {n_events}")

    active_us, movement_us, idle_us = quantize_target(target, wall_time)

    required = int(active_us > 0) + int(movement_us > 0)
    if n_events < required:
        raise TraceValidationError(
            f"target needs at least {required} events (kernel and memcpy) but n_events={n_events}"
        )

    rng = np.random.default_rng(seed)

    # Primary events tile the timeline; anything left over becomes nested filler
    if active_us > 0 and movement_us > 0:
        share = active_us / (active_us + movement_us)
        n_active = min(max(1, int(round(n_events * share))), n_events - 1)
        n_active = min(n_active, active_us)
        n_movement = min(n_events - n_active, movement_us)
    elif active_us > 0:
        n_active, n_movement = min(n_events, active_us), 0
    elif movement_us > 0:
        n_active, n_movement = 0, min(n_events, movement_us)
    else:
        n_active = n_movement = 0
    n_filler = n_events - n_active - n_movement

    chunks: List[Tuple[str, int]] = [("kernel", length) for length in _split(active_us, n_active, rng)]
    for length in _split(movement_us, n_movement, rng):
        chunks.append(("h2d" if rng.random() < 0.5 else "d2h", length))
    order = rng.permutation(len(chunks)) if chunks else []
    chunks = [chunks[i] for i in order]
    gaps = _split_allow_zero(idle_us, len(chunks) + 1, rng)

    events: List[Dict] = []
    kernel_spans: List[Tuple[int, int]] = []
    cursor = gaps[0]
    for (kind, length), gap_after in zip(chunks, gaps[1:]):
        if kind == "kernel":
            events.append({
                "ph": "X", "pid": 0, "tid": 7, "cat": "kernel",
                "name": f"synthetic_kernel_{len(events)}", "ts": cursor, "dur": length,
            })
            kernel_spans.append((cursor, cursor + length))
        else:
            events.append({
                "ph": "X", "pid": 0, "tid": 8, "cat": "gpu_memcpy",
                "name": _MEMCPY_NAMES[kind], "ts": cursor, "dur": length,
            })
        cursor += length + gap_after

    for i in range(n_filler):
        if kernel_spans:
            # Overlapping kernel on a second stream, inside an existing kernel span
            start, end = kernel_spans[int(rng.integers(0, len(kernel_spans)))]
            ts = int(rng.integers(start, end))
            dur = int(rng.integers(0, end - ts + 1))
            events.append({
                "ph": "X", "pid": 0, "tid": 9, "cat": "kernel",
                "name": f"synthetic_overlap_{i}", "ts": ts, "dur": dur,
            })
        else:
            ts = int(rng.integers(0, wall_time + 1))
            events.append({
                "ph": "X", "pid": 0, "tid": 1, "cat": "cuda_runtime",
                "name": "cudaStreamSynchronize", "ts": ts, "dur": 0,
            })

    events.sort(key=lambda e: (e["ts"], e["tid"]))
    return events


def emit_synthetic_trace(
    target: Decomposition,
    wall_time: int,
    n_events: int,
    seed: int,
    path: Union[str, Path],
) -> Path:
    """Write a trace whose decomposition over ``wall_time`` equals ``target``"""
    events = build_synthetic_events(target, wall_time, n_events, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"traceEvents": events}))
    logger.debug("Wrote %d synthetic events to %s", len(events), path)
    return path

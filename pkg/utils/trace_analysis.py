"""
Device Timeline Analysis
Parses Chrome-trace-format device timelines and splits the computation region into
GPU-active, CPU<->GPU data movement and idle time.

All interval arithmetic is done in integer microseconds; floats only appear in the
final fractions.
"""

from __future__ import annotations

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import TraceParseError, TraceValidationError

logger = logging.getLogger(__name__)

FRACTION_SUM_TOLERANCE = 1e-9


class EventCategory(str, Enum):
    KERNEL = "kernel"
    MEMCPY_H2D = "memcpy_h2d"
    MEMCPY_D2H = "memcpy_d2h"
    MEMCPY_D2D = "memcpy_d2d"
    OTHER = "other"


# Device-local copies keep the device busy, so they count as compute
ACTIVE_CATEGORIES = frozenset({EventCategory.KERNEL, EventCategory.MEMCPY_D2D})
MOVEMENT_CATEGORIES = frozenset({EventCategory.MEMCPY_H2D, EventCategory.MEMCPY_D2H})


class TraceEvent(BaseModel):
    """One complete ("ph": "X") event on a device stream"""

    model_config = ConfigDict(frozen=True)

    stream_id: int = 0
    category: EventCategory
    name: str = ""
    start: int = Field(ge=0)
    duration: int = Field(ge=0)

    @property
    def end(self) -> int:
        return self.start + self.duration


class IntervalSet:
    """Disjoint, sorted half-open intervals [start, end)"""

    __slots__ = ("_spans",)

    def __init__(self, spans: Iterable[Tuple[int, int]] = ()):
        self._spans: Tuple[Tuple[int, int], ...] = _merge(spans)

    @property
    def spans(self) -> Tuple[Tuple[int, int], ...]:
        return self._spans

    @property
    def total_length(self) -> int:
        return sum(end - start for start, end in self._spans)

    def __len__(self) -> int:
        return len(self._spans)

    def __iter__(self):
        return iter(self._spans)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IntervalSet):
            return NotImplemented
        return self._spans == other._spans

    def __hash__(self) -> int:
        return hash(self._spans)

    def __repr__(self) -> str:
        inner = ", ".join(f"[{s}, {e})" for s, e in self._spans)
        return f"IntervalSet({{{inner}}})"

    def union(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet(self._spans + other._spans)

    def difference(self, other: "IntervalSet") -> "IntervalSet":
        """Portions of self not covered by other"""
        result: List[Tuple[int, int]] = []
        others = other._spans
        j = 0
        for start, end in self._spans:
            cursor = start
            while j < len(others) and others[j][1] <= cursor:
                j += 1
            k = j
            while k < len(others) and others[k][0] < end:
                o_start, o_end = others[k]
                if o_start > cursor:
                    result.append((cursor, o_start))
                cursor = max(cursor, o_end)
                if cursor >= end:
                    break
                k += 1
            if cursor < end:
                result.append((cursor, end))
        return IntervalSet(result)


def _merge(spans: Iterable[Tuple[int, int]]) -> Tuple[Tuple[int, int], ...]:
    ordered = sorted((int(s), int(e)) for s, e in spans if e > s)
    merged: List[Tuple[int, int]] = []
    for start, end in ordered:
        if merged and start <= merged[-1][1]:
            if end > merged[-1][1]:
                merged[-1] = (merged[-1][0], end)
        else:
            merged.append((start, end))
    return tuple(merged)


class Decomposition(BaseModel):
    """Active / movement / idle portions of one computation region"""

    model_config = ConfigDict(frozen=True)

    active_fraction: float = Field(ge=0.0, le=1.0)
    movement_fraction: float = Field(ge=0.0, le=1.0)
    idle_fraction: float = Field(ge=0.0, le=1.0)
    denominator_wall_time: Optional[int] = Field(default=None, gt=0)
    active_us: Optional[int] = None
    movement_us: Optional[int] = None
    idle_us: Optional[int] = None

    @model_validator(mode="after")
    def _fractions_sum_to_one(self) -> "Decomposition":
        total = self.active_fraction + self.movement_fraction + self.idle_fraction
        if abs(total - 1.0) > FRACTION_SUM_TOLERANCE:
            raise ValueError(f"fractions must sum to 1, got {total!r}")
        return self

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.active_fraction, self.movement_fraction, self.idle_fraction)


def classify_event(cat: str, name: str) -> EventCategory:
    cat_lower = (cat or "").lower()
    if "kernel" in cat_lower:
        return EventCategory.KERNEL
    if "gpu_memcpy" in cat_lower:
        if "HtoD" in name:
            return EventCategory.MEMCPY_H2D
        if "DtoH" in name:
            return EventCategory.MEMCPY_D2H
        if "DtoD" in name:
            return EventCategory.MEMCPY_D2D
    return EventCategory.OTHER


def _as_microseconds(value: Any, field: str, index: int) -> int:
    if isinstance(value, bool) or value is None:
        raise TraceParseError(index, f"{field} is not numeric: {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise TraceParseError(index, f"{field} is not numeric: {value!r}") from None
    if not math.isfinite(number):
        raise TraceParseError(index, f"{field} is not finite: {value!r}")
    return int(round(number))


def events_from_records(records: Sequence[Any]) -> List[TraceEvent]:
    events: List[TraceEvent] = []
    for index, record in enumerate(records):
        if not isinstance(record, dict):
            raise TraceParseError(index, "record is not an object")
        if record.get("ph", "X") != "X":
            continue
        if "ts" not in record or "dur" not in record:
            raise TraceParseError(index, "complete event needs 'ts' and 'dur'")

        start = _as_microseconds(record["ts"], "ts", index)
        duration = _as_microseconds(record["dur"], "dur", index)
        if duration < 0:
            raise TraceParseError(index, f"negative duration {duration}")
        if start < 0:
            raise TraceParseError(index, f"negative timestamp {start}")

        try:
            stream_id = int(record.get("tid", 0))
        except (TypeError, ValueError):
            stream_id = 0

        name = str(record.get("name", ""))
        events.append(TraceEvent(
            stream_id=stream_id,
            category=classify_event(str(record.get("cat", "")), name),
            name=name,
            start=start,
            duration=duration,
        ))
    return events


def parse_trace(path: Union[str, Path]) -> List[TraceEvent]:
    """Read a JSON trace file (bare event array or ``{"traceEvents": [...]}``)"""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TraceParseError(0, f"invalid JSON: {exc}") from exc

    if isinstance(payload, dict):
        records = payload.get("traceEvents")
        if not isinstance(records, list):
            raise TraceParseError(0, "'traceEvents' must be an array")
    elif isinstance(payload, list):
        records = payload
    else:
        raise TraceParseError(0, "trace must be an array or a traceEvents object")

    events = events_from_records(records)
    logger.debug("Parsed %d events from %s", len(events), path)
    return events


def union_intervals(
    events: Iterable[TraceEvent],
    categories: Optional[Iterable[EventCategory]] = None,
) -> IntervalSet:
    """Union of event spans across all streams, optionally filtered by category"""
    wanted = None if categories is None else frozenset(categories)
    return IntervalSet(
        (event.start, event.end)
        for event in events
        if wanted is None or event.category in wanted
    )


def decompose(events: Sequence[TraceEvent], wall_time: int) -> Decomposition:
    """
    Split ``wall_time`` into active, movement and idle portions.

    Movement overlapped by compute is counted as active.
    """
    if wall_time <= 0:
        raise TraceValidationError(f"wall_time must be positive, got {wall_time}")

    for index, event in enumerate(events):
        if event.end > wall_time:
            raise TraceValidationError(
                f"event {index} ({event.name or event.category.value}) ends at {event.end} us, "
                f"past wall_time {wall_time} us"
            )

    active = union_intervals(events, ACTIVE_CATEGORIES)
    movement = union_intervals(events, MOVEMENT_CATEGORIES).difference(active)

    active_us = active.total_length
    movement_us = movement.total_length
    idle_us = wall_time - active_us - movement_us

    active_fraction = active_us / wall_time
    movement_fraction = movement_us / wall_time
    idle_fraction = idle_us / wall_time

    return Decomposition(
        active_fraction=active_fraction,
        movement_fraction=movement_fraction,
        idle_fraction=idle_fraction,
        denominator_wall_time=wall_time,
        active_us=active_us,
        movement_us=movement_us,
        idle_us=idle_us,
    )


def decompose_file(path: Union[str, Path], wall_time: int) -> Decomposition:
    return decompose(parse_trace(path), wall_time)


def decomposition_summary(decomposition: Decomposition) -> Dict[str, Any]:
    return {
        "active_pct": round(decomposition.active_fraction * 100, 1),
        "movement_pct": round(decomposition.movement_fraction * 100, 1),
        "idle_pct": round(decomposition.idle_fraction * 100, 1),
        "wall_time_us": decomposition.denominator_wall_time,
        "overlap_rule": "compute has priority over movement",
    }

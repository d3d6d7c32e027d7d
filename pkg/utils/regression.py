"""
Regression Detection and Baseline Store
Threshold checks of a nightly configuration matrix against the accepted baseline, and
the on-disk baseline store (current pointer + append-only history).
"""

from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

from .errors import BaselineSchemaError, StoreLockedError
from .measurement import CellStatus, ConfigMatrix, MeasurementSet

logger = logging.getLogger(__name__)

BASELINE_SCHEMA_VERSION = 1
MiB = 1024 * 1024

CellMetrics = Mapping[str, float]


class Metric(str, Enum):
    WALL_TIME = "wall_time"
    PEAK_CPU_MEM = "peak_cpu_mem"
    PEAK_GPU_MEM = "peak_gpu_mem"
    LEAK = "leak"


RATIO_CHECKED = (Metric.WALL_TIME, Metric.PEAK_CPU_MEM, Metric.PEAK_GPU_MEM)


def cell_id(workload: str, mode: str, device: str) -> str:
    return f"{workload}/{mode}/{device}"


def split_cell_id(cell: str) -> Tuple[str, str, str]:
    workload, mode, device = cell.split("/")
    return workload, mode, device


class RegressionPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    time_threshold: float = Field(default=0.07, gt=0)
    mem_threshold: float = Field(default=0.07, gt=0)
    leak_threshold: int = Field(default=MiB, gt=0, description="bytes of post-run resident growth")
    min_abs_time: int = Field(default=1000, gt=0, description="microseconds")

    def threshold_for(self, metric: Metric) -> float:
        if metric is Metric.WALL_TIME:
            return self.time_threshold
        if metric is Metric.LEAK:
            return float(self.leak_threshold)
        return self.mem_threshold


def metric_field(metric: Metric) -> str:
    return "post_run_resident_mem" if metric is Metric.LEAK else metric.value


def is_regression(
    metric: Metric,
    baseline_value: float,
    observed_value: float,
    policy: RegressionPolicy,
) -> bool:
    """The flagging rule shared by nightly detection and bisection probes"""
    if metric is Metric.LEAK:
        return observed_value - baseline_value >= policy.leak_threshold
    if baseline_value <= 0:
        return False
    if metric is Metric.WALL_TIME and baseline_value < policy.min_abs_time:
        return False
    return observed_value / baseline_value >= 1.0 + policy.threshold_for(metric)


class RegressionFinding(BaseModel):
    model_config = ConfigDict(frozen=True)

    cell: str
    metric: Metric
    baseline_value: float
    observed_value: float
    ratio: float
    threshold: float
    culprit: Optional[str] = None

    def with_culprit(self, culprit: Optional[str]) -> "RegressionFinding":
        return self.model_copy(update={"culprit": culprit})


class BaselineCell(BaseModel):
    model_config = ConfigDict(frozen=True)

    wall_time: float
    peak_cpu_mem: float
    peak_gpu_mem: float
    post_run_resident_mem: float
    commit: str
    timestamp: str

    def value(self, metric: Metric) -> float:
        return getattr(self, metric_field(metric))


class Baseline(BaseModel):
    model_config = ConfigDict(frozen=True)

    schema_version: int = BASELINE_SCHEMA_VERSION
    commit: str
    timestamp: str
    cells: Dict[str, BaselineCell] = Field(default_factory=dict)


class DetectionReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    findings: Tuple[RegressionFinding, ...] = ()
    new_cells: Tuple[str, ...] = ()
    checked_cells: int = 0

    @property
    def clean(self) -> bool:
        return not self.findings

    def flagged_cells(self) -> List[str]:
        seen: List[str] = []
        for finding in self.findings:
            if finding.cell not in seen:
                seen.append(finding.cell)
        return seen


def observed_cells(
    observed: Union[Iterable[ConfigMatrix], Iterable[MeasurementSet], Mapping[str, CellMetrics]],
) -> Dict[str, Dict[str, float]]:
    """Flatten matrices / measurement sets into ``{cell_id: metrics}``"""
    if isinstance(observed, Mapping):
        return {cell: dict(metrics) for cell, metrics in observed.items()}

    cells: Dict[str, Dict[str, float]] = {}
    for item in observed:
        if isinstance(item, ConfigMatrix):
            for record in item.cells:
                if record.status is CellStatus.MEASURED:
                    m = record.measurement
                    cells[cell_id(*m.cell)] = dict(m.aggregate)
        else:
            cells[cell_id(*item.cell)] = dict(item.aggregate)
    return cells


def detect_regressions(
    baseline: Optional[Baseline],
    observed: Union[Iterable[ConfigMatrix], Iterable[MeasurementSet], Mapping[str, CellMetrics]],
    policy: Optional[RegressionPolicy] = None,
) -> DetectionReport:
    policy = policy or RegressionPolicy()
    cells = observed_cells(observed)
    if not cells:
        raise ValueError("observed matrix is empty")

    if baseline is None:
        return DetectionReport(new_cells=tuple(sorted(cells)), checked_cells=0)
    if baseline.schema_version != BASELINE_SCHEMA_VERSION:
        raise BaselineSchemaError(
            f"baseline schema {baseline.schema_version} != supported {BASELINE_SCHEMA_VERSION}"
        )

    findings: List[RegressionFinding] = []
    new_cells: List[str] = []
    checked = 0
    for cell in sorted(cells):
        metrics = cells[cell]
        reference = baseline.cells.get(cell)
        if reference is None:
            new_cells.append(cell)
            continue
        checked += 1
        for metric in RATIO_CHECKED + (Metric.LEAK,):
            base_value = reference.value(metric)
            observed_value = metrics[metric_field(metric)]
            if not is_regression(metric, base_value, observed_value, policy):
                continue
            ratio = observed_value / base_value if base_value > 0 else float("inf")
            findings.append(RegressionFinding(
                cell=cell,
                metric=metric,
                baseline_value=base_value,
                observed_value=observed_value,
                ratio=ratio,
                threshold=policy.threshold_for(metric),
            ))

    for finding in findings:
        logger.warning(
            "Regression in %s %s: %.0f -> %.0f (x%.3f)",
            finding.cell, finding.metric.value, finding.baseline_value, finding.observed_value, finding.ratio,
        )
    return DetectionReport(findings=tuple(findings), new_cells=tuple(new_cells), checked_cells=checked)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def update_baseline(
    baseline: Optional[Baseline],
    observed: Union[Iterable[ConfigMatrix], Iterable[MeasurementSet], Mapping[str, CellMetrics]],
    findings: Iterable[RegressionFinding],
    commit: str,
    timestamp: Optional[str] = None,
) -> Baseline:
    """
    Advance clean cells to the observed values; flagged cells keep their old reference.
    With no prior baseline every observed cell initializes it.
    """
    timestamp = timestamp or _now()
    cells = observed_cells(observed)
    flagged = {finding.cell for finding in findings}

    merged: Dict[str, BaselineCell] = dict(baseline.cells) if baseline else {}
    for cell, metrics in cells.items():
        if cell in flagged and cell in merged:
            continue
        merged[cell] = BaselineCell(
            wall_time=metrics["wall_time"],
            peak_cpu_mem=metrics["peak_cpu_mem"],
            peak_gpu_mem=metrics["peak_gpu_mem"],
            post_run_resident_mem=metrics["post_run_resident_mem"],
            commit=commit,
            timestamp=timestamp,
        )

    return Baseline(commit=commit, timestamp=timestamp, cells=merged)


class BaselineStore:
    """
    Directory layout:
        baseline.current   JSON of the accepted Baseline
        history.jsonl      one JSON Baseline per accepted nightly, append-only
        baseline.lock      present while a process mutates the store
    """

    CURRENT = "baseline.current"
    HISTORY = "history.jsonl"
    LOCK = "baseline.lock"

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    @property
    def current_path(self) -> Path:
        return self.directory / self.CURRENT

    @property
    def history_path(self) -> Path:
        return self.directory / self.HISTORY

    @property
    def lock_path(self) -> Path:
        return self.directory / self.LOCK

    def load(self) -> Optional[Baseline]:
        if not self.current_path.exists():
            return None
        data = json.loads(self.current_path.read_text())
        version = data.get("schema_version")
        if version != BASELINE_SCHEMA_VERSION:
            raise BaselineSchemaError(
                f"{self.current_path} has schema {version}, expected {BASELINE_SCHEMA_VERSION}"
            )
        return Baseline.model_validate(data)

    def history(self) -> List[Baseline]:
        if not self.history_path.exists():
            return []
        return [
            Baseline.model_validate_json(line)
            for line in self.history_path.read_text().splitlines()
            if line.strip()
        ]

    @contextmanager
    def lock(self) -> Iterator[None]:
        self.directory.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreLockedError(f"Baseline store {self.directory} is locked ({self.lock_path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            self.lock_path.unlink(missing_ok=True)

    def save(self, baseline: Baseline) -> Path:
        """Append to history and move the current pointer; caller holds the lock"""
        self.directory.mkdir(parents=True, exist_ok=True)
        payload = baseline.model_dump_json()
        with self.history_path.open("a") as handle:
            handle.write(payload + "\n")
        tmp = self.current_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(json.loads(payload), indent=2))
        os.replace(tmp, self.current_path)
        logger.info("Baseline advanced to %s (%d cells)", baseline.commit, len(baseline.cells))
        return self.current_path

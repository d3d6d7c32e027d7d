"""
Comparison Analytics
Speedup ratios, geomean summaries, variant and platform comparisons, and the
per-domain execution-time breakdown table.

Ratios are always stored raw as candidate / baseline (or A / B); "< 1 means the
candidate (or A) performs better". Speedups are derived at render time.
"""

from __future__ import annotations

import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from .errors import ComparisonError
from .measurement import MeasurementSet
from .trace_analysis import Decomposition

logger = logging.getLogger(__name__)

RATIO_METRICS = ("wall_time", "peak_cpu_mem", "peak_gpu_mem")
ROW_SUM_TOLERANCE = 0.1


def geomean(values: Iterable[float]) -> float:
    """Geometric mean computed in log space"""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("geomean of an empty list")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError("geomean needs finite, strictly positive values")
    return float(np.exp(np.mean(np.log(arr))))


def speedup_ratio(t_a: float, t_b: float) -> float:
    """t_a / t_b; below 1 means A is faster"""
    if t_b <= 0:
        raise ValueError(f"denominator duration must be positive, got {t_b}")
    if t_a <= 0:
        raise ValueError(f"numerator duration must be positive, got {t_a}")
    return t_a / t_b


def format_percent_change(ratio: float) -> str:
    """0.288 -> '−71.2%', 1.12 -> '+12.0%'"""
    change = (ratio - 1.0) * 100
    if round(change, 1) == 0:
        return "0.0%"
    sign = "+" if change > 0 else "−"
    return f"{sign}{abs(change):.1f}%"


# ---------------------------------------------------------------------------
# Variant comparison
# ---------------------------------------------------------------------------

class VariantRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    workload: str
    mode: str
    device: str
    wall_time: float = Field(gt=0)
    peak_cpu_mem: Optional[float] = Field(default=None, gt=0)
    peak_gpu_mem: Optional[float] = Field(default=None, gt=0)


class VariantComparison(BaseModel):
    model_config = ConfigDict(frozen=True)

    baseline_label: str
    candidate_label: str
    rows: Tuple[VariantRow, ...]
    geomeans: Dict[str, Optional[float]]
    coverage: Tuple[str, ...]
    orientation: str = "ratio = candidate / baseline; < 1 means candidate performs better"

    def percent_changes(self) -> List[Dict[str, str]]:
        rendered = []
        for row in self.rows:
            entry = {"workload": row.workload, "mode": row.mode, "device": row.device}
            for metric in RATIO_METRICS:
                value = getattr(row, metric)
                entry[metric] = format_percent_change(value) if value is not None else "n/a"
            rendered.append(entry)
        return rendered


def _index_by_cell(sets: Iterable[MeasurementSet]) -> Dict[Tuple[str, str, str], MeasurementSet]:
    indexed = {}
    for measurement in sets:
        indexed[measurement.cell] = measurement
    return indexed


def _metric_ratio(candidate: float, baseline: float) -> Optional[float]:
    if baseline <= 0 or candidate <= 0:
        return None
    return candidate / baseline


def compare_variants(
    baseline: Iterable[MeasurementSet],
    candidate: Iterable[MeasurementSet],
    baseline_label: str = "baseline",
    candidate_label: str = "candidate",
) -> VariantComparison:
    base_cells = _index_by_cell(baseline)
    cand_cells = _index_by_cell(candidate)
    if not base_cells or not cand_cells:
        raise ComparisonError("both sides need at least one measurement")

    common = sorted(set(base_cells) & set(cand_cells))
    if not common:
        raise ComparisonError("no common workloads")

    rows: List[VariantRow] = []
    for cell in common:
        base_metrics = base_cells[cell].aggregate
        cand_metrics = cand_cells[cell].aggregate
        rows.append(VariantRow(
            workload=cell[0],
            mode=cell[1],
            device=cell[2],
            wall_time=speedup_ratio(cand_metrics["wall_time"], base_metrics["wall_time"]),
            peak_cpu_mem=_metric_ratio(cand_metrics["peak_cpu_mem"], base_metrics["peak_cpu_mem"]),
            peak_gpu_mem=_metric_ratio(cand_metrics["peak_gpu_mem"], base_metrics["peak_gpu_mem"]),
        ))

    geomeans: Dict[str, Optional[float]] = {}
    for metric in RATIO_METRICS:
        values = [getattr(row, metric) for row in rows if getattr(row, metric) is not None]
        geomeans[metric] = geomean(values) if values else None

    base_workloads = {cell[0] for cell in base_cells}
    cand_workloads = {cell[0] for cell in cand_cells}
    coverage = tuple(sorted(base_workloads ^ cand_workloads))
    if coverage:
        logger.info("Workloads present on one side only: %s", ", ".join(coverage))

    return VariantComparison(
        baseline_label=baseline_label,
        candidate_label=candidate_label,
        rows=tuple(rows),
        geomeans=geomeans,
        coverage=coverage,
    )


def speedup_summary(baseline: MeasurementSet, candidate: MeasurementSet) -> float:
    """
    Arithmetic mean of per-repeat speedups (baseline time / candidate time, > 1 means
    the candidate is faster). Runs are paired by repeat index.
    """
    pairs = [
        (b.wall_time, c.wall_time)
        for b, c in zip(baseline.runs, candidate.runs)
        if b.ok and c.ok
    ]
    if not pairs:
        raise ComparisonError("no successful run pairs to compute speedups from")
    return float(np.mean([speedup_ratio(b, c) for b, c in pairs]))


# ---------------------------------------------------------------------------
# Platform comparison
# ---------------------------------------------------------------------------

class PlatformRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    workload: str
    mode: str
    ratio: float = Field(gt=0)


class PlatformComparison(BaseModel):
    model_config = ConfigDict(frozen=True)

    label_a: str
    label_b: str
    rows: Tuple[PlatformRow, ...]
    geomean_by_mode: Dict[str, float]

    @property
    def orientation(self) -> str:
        return f"ratio = T_{self.label_a} / T_{self.label_b}; < 1 means {self.label_a} performs better"


def compare_platforms(
    platform_a: Iterable[MeasurementSet],
    platform_b: Iterable[MeasurementSet],
    label_a: str,
    label_b: str,
    device: str = "gpu",
) -> PlatformComparison:
    a_cells = {(m.workload, m.config.mode): m for m in platform_a if m.config.device == device}
    b_cells = {(m.workload, m.config.mode): m for m in platform_b if m.config.device == device}
    common = sorted(set(a_cells) & set(b_cells))
    if not common:
        raise ComparisonError("no common workloads")

    rows = tuple(
        PlatformRow(
            workload=workload,
            mode=mode,
            ratio=speedup_ratio(a_cells[(workload, mode)].aggregate["wall_time"],
                                b_cells[(workload, mode)].aggregate["wall_time"]),
        )
        for workload, mode in common
    )
    by_mode: Dict[str, List[float]] = {}
    for row in rows:
        by_mode.setdefault(row.mode, []).append(row.ratio)

    return PlatformComparison(
        label_a=label_a,
        label_b=label_b,
        rows=rows,
        geomean_by_mode={mode: geomean(values) for mode, values in by_mode.items()},
    )


# ---------------------------------------------------------------------------
# Breakdown table
# ---------------------------------------------------------------------------

def round_percentages(fractions: Sequence[float]) -> List[float]:
    """Percentages to one decimal with largest-remainder rounding, so they sum to 100.0"""
    tenths = [f * 1000 for f in fractions]
    floors = [math.floor(t + 1e-9) for t in tenths]
    missing = 1000 - sum(floors)
    order = sorted(range(len(tenths)), key=lambda i: tenths[i] - floors[i], reverse=True)
    for i in order[:max(0, missing)]:
        floors[i] += 1
    return [value / 10 for value in floors]


class BreakdownRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    domain: str
    mode: str
    active_pct: float
    movement_pct: float
    idle_pct: float
    workloads: int = 1

    @property
    def total(self) -> float:
        return self.active_pct + self.movement_pct + self.idle_pct


class BreakdownTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: Tuple[BreakdownRow, ...]
    workload_rows: Tuple[Dict[str, object], ...] = ()
    footer: str = (
        "Domain rows are arithmetic means of per-workload fractions. "
        "Host-device copies overlapped by compute are counted as active."
    )

    def check_row_sums(self) -> None:
        for row in self.rows:
            if abs(row.total - 100.0) > ROW_SUM_TOLERANCE:
                raise ValueError(f"{row.domain}/{row.mode} sums to {row.total:.1f}, not 100")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "Domain": row.domain,
                "Mode": row.mode,
                "GPU Activeness (%)": row.active_pct,
                "Data Movement (%)": row.movement_pct,
                "GPU Idleness (%)": row.idle_pct,
            }
            for row in self.rows
        ])


def breakdown_report(
    decompositions: Sequence[Tuple[str, str, str, Decomposition]],
) -> BreakdownTable:
    """Average (workload, domain, mode, decomposition) entries per (domain, mode)"""
    if not decompositions:
        raise ValueError("breakdown_report needs at least one decomposition")

    frame = pd.DataFrame([
        {
            "workload": workload,
            "domain": domain,
            "mode": mode,
            "active": d.active_fraction,
            "movement": d.movement_fraction,
            "idle": d.idle_fraction,
        }
        for workload, domain, mode, d in decompositions
    ])

    grouped = frame.groupby(["domain", "mode"], sort=True).agg(
        active=("active", "mean"),
        movement=("movement", "mean"),
        idle=("idle", "mean"),
        workloads=("workload", "count"),
    )

    rows = []
    for (domain, mode), group in grouped.iterrows():
        active, movement, idle = round_percentages([group["active"], group["movement"], group["idle"]])
        rows.append(BreakdownRow(
            domain=domain,
            mode=mode,
            active_pct=active,
            movement_pct=movement,
            idle_pct=idle,
            workloads=int(group["workloads"]),
        ))

    workload_rows = []
    for record in frame.sort_values(["domain", "mode", "workload"]).to_dict("records"):
        active, movement, idle = round_percentages([record["active"], record["movement"], record["idle"]])
        workload_rows.append({
            "workload": record["workload"],
            "domain": record["domain"],
            "mode": record["mode"],
            "active_pct": active,
            "movement_pct": movement,
            "idle_pct": idle,
        })

    table = BreakdownTable(rows=tuple(rows), workload_rows=tuple(workload_rows))
    table.check_row_sums()
    return table

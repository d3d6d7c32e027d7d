"""
Report rendering
JSON (canonical, versioned), Markdown and CSV renderers for measurements, comparisons,
breakdown tables, regression findings and bisection probe logs.
See docs/report_schemas.md for the JSON layouts.
"""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd

from .analytics import BreakdownTable, PlatformComparison, VariantComparison, format_percent_change
from .measurement import ConfigMatrix, MeasurementSet
from .regression import DetectionReport, Metric

REPORT_SCHEMA_VERSION = 1


def fmt_ratio(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def fmt_metric(metric: Metric, value: float) -> str:
    if metric is Metric.WALL_TIME:
        return f"{value:.0f} us"
    return f"{value:.0f} B"


def _markdown(frame: pd.DataFrame, **kwargs) -> str:
    if frame.empty:
        return "_none_"
    return frame.to_markdown(index=False, **kwargs)


def write_json(path: Union[str, Path], kind: str, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "schema": kind,
        "schema_version": REPORT_SCHEMA_VERSION,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        **payload,
    }
    path.write_text(json.dumps(document, indent=2, default=str))
    return path


def write_text(path: Union[str, Path], text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

def measurement_record(measurement: MeasurementSet) -> Dict[str, Any]:
    return json.loads(measurement.model_dump_json())


def raw_run_rows(measurements: Iterable[MeasurementSet]) -> List[Dict[str, Any]]:
    rows = []
    for measurement in measurements:
        for index, run in enumerate(measurement.runs):
            rows.append({
                "workload": measurement.workload,
                "mode": measurement.config.mode,
                "device": measurement.config.device,
                "batch_size": measurement.config.batch_size,
                "precision": measurement.config.precision,
                "run_index": index,
                "selected": index == measurement.selected_index,
                "exit_class": run.exit_class.value,
                "wall_time_us": run.wall_time,
                "peak_cpu_mem_bytes": run.peak_cpu_mem,
                "peak_gpu_mem_bytes": run.peak_gpu_mem,
                "post_run_resident_bytes": run.post_run_resident_mem,
                "trace_path": run.trace_path,
            })
    return rows


def write_raw_runs(out_dir: Union[str, Path], measurements: Iterable[MeasurementSet]) -> Path:
    """runs.jsonl + runs.csv with every raw run, so analytics can be re-run offline"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    measurements = list(measurements)
    with (out_dir / "measurements.jsonl").open("w") as handle:
        for measurement in measurements:
            handle.write(measurement.model_dump_json() + "\n")
    rows = raw_run_rows(measurements)
    with (out_dir / "runs.jsonl").open("w") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    pd.DataFrame(rows).to_csv(out_dir / "runs.csv", index=False)
    return out_dir / "runs.jsonl"


def load_measurements(directory: Union[str, Path]) -> List[MeasurementSet]:
    path = Path(directory) / "measurements.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"No measurements.jsonl in {directory}")
    return [
        MeasurementSet.model_validate_json(line)
        for line in path.read_text().splitlines()
        if line.strip()
    ]


def matrix_record(matrix: ConfigMatrix) -> Dict[str, Any]:
    return {
        "workload": matrix.workload,
        "cells": [
            {
                "mode": cell.mode,
                "device": cell.device,
                "status": cell.status.value,
                "reason": cell.reason,
                "batch_size": cell.batch_size,
                "metrics": cell.measurement.aggregate if cell.measurement else None,
                "degraded": cell.measurement.degraded if cell.measurement else None,
            }
            for cell in matrix.cells
        ],
    }


def render_matrix_markdown(matrices: Sequence[ConfigMatrix]) -> str:
    rows = []
    for matrix in matrices:
        for cell in matrix.cells:
            metrics = cell.measurement.aggregate if cell.measurement else {}
            rows.append({
                "Workload": matrix.workload,
                "Mode": cell.mode,
                "Device": cell.device,
                "Status": cell.status.value if not cell.reason else f"{cell.status.value} ({cell.reason})",
                "BS": cell.batch_size if cell.batch_size is not None else "",
                "Wall time (us)": f"{metrics['wall_time']:.0f}" if metrics else "",
                "Peak CPU mem (B)": f"{metrics['peak_cpu_mem']:.0f}" if metrics else "",
                "Peak GPU mem (B)": f"{metrics['peak_gpu_mem']:.0f}" if metrics else "",
            })
    return _markdown(pd.DataFrame(rows))


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------

def comparison_record(comparison: VariantComparison) -> Dict[str, Any]:
    record = json.loads(comparison.model_dump_json())
    record["percent_changes"] = comparison.percent_changes()
    return record


def render_comparison_markdown(comparison: VariantComparison) -> str:
    frame = pd.DataFrame([
        {
            "Workload": row.workload,
            "Mode": row.mode,
            "Device": row.device,
            "Time ratio": fmt_ratio(row.wall_time),
            "CPU mem ratio": fmt_ratio(row.peak_cpu_mem),
            "CPU mem change": format_percent_change(row.peak_cpu_mem) if row.peak_cpu_mem else "n/a",
            "GPU mem ratio": fmt_ratio(row.peak_gpu_mem),
            "GPU mem change": format_percent_change(row.peak_gpu_mem) if row.peak_gpu_mem else "n/a",
        }
        for row in comparison.rows
    ])
    lines = [
        f"# {comparison.candidate_label} vs {comparison.baseline_label}",
        "",
        f"_{comparison.orientation}_",
        "",
        _markdown(frame),
        "",
        "**Geomean:** " + ", ".join(
            f"{metric} {fmt_ratio(value)}" for metric, value in comparison.geomeans.items()
        ),
    ]
    time_geomean = comparison.geomeans.get("wall_time")
    if time_geomean:
        lines.append(f"**Speedup (geomean):** {1 / time_geomean:.2f}x")
    if comparison.coverage:
        lines += ["", "**Not compared (present on one side only):** " + ", ".join(comparison.coverage)]
    return "\n".join(lines) + "\n"


def render_platform_markdown(comparison: PlatformComparison) -> str:
    frame = pd.DataFrame([
        {"Workload": row.workload, "Mode": row.mode, "Ratio": fmt_ratio(row.ratio)}
        for row in comparison.rows
    ])
    lines = [
        f"# {comparison.label_a} vs {comparison.label_b}",
        "",
        f"_{comparison.orientation}_",
        "",
        _markdown(frame),
        "",
        "**Geomean by mode:** " + ", ".join(
            f"{mode} {fmt_ratio(value)}" for mode, value in sorted(comparison.geomean_by_mode.items())
        ),
    ]
    return "\n".join(lines) + "\n"


def breakdown_record(table: BreakdownTable) -> Dict[str, Any]:
    return json.loads(table.model_dump_json())


def render_breakdown_markdown(table: BreakdownTable) -> str:
    return "\n".join([
        "# Execution time breakdown",
        "",
        table.to_frame().to_markdown(index=False, floatfmt=".1f"),
        "",
        f"_{table.footer}_",
    ]) + "\n"


def breakdown_csv(table: BreakdownTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_frame().to_csv(path, index=False)
    pd.DataFrame(list(table.workload_rows)).to_csv(path.with_name(path.stem + "_workloads.csv"), index=False)
    return path


# ---------------------------------------------------------------------------
# Regression findings and bisection
# ---------------------------------------------------------------------------

def findings_record(report: DetectionReport, sessions: Sequence = ()) -> Dict[str, Any]:
    return {
        "findings": [json.loads(f.model_dump_json()) for f in report.findings],
        "new_cells": list(report.new_cells),
        "checked_cells": report.checked_cells,
        "bisections": [json.loads(s.model_dump_json()) for s in sessions],
    }


def render_findings_table(report: DetectionReport) -> str:
    frame = pd.DataFrame([
        {
            "Cell": finding.cell,
            "Metric": finding.metric.value,
            "Baseline": fmt_metric(finding.metric, finding.baseline_value),
            "Observed": fmt_metric(finding.metric, finding.observed_value),
            "Ratio": fmt_ratio(finding.ratio),
            "Threshold": (f"+{finding.threshold * 100:.1f}%" if finding.metric is not Metric.LEAK
                          else f"+{finding.threshold:.0f} B"),
            "Culprit": finding.culprit or "",
        }
        for finding in report.findings
    ])
    return _markdown(frame)


def render_probe_log(session) -> str:
    frame = pd.DataFrame([
        {
            "#": position + 1,
            "Commit": record.commit,
            "Index": record.index if record.index >= 0 else "good",
            "Outcome": record.outcome.status.value,
            "Observed": f"{record.outcome.observed:.0f}" if record.outcome.observed is not None else "",
            "Note": record.outcome.reason or "",
        }
        for position, record in enumerate(session.probe_log)
    ])
    verdict = (f"culprit **{session.culprit}**" if session.culprit
               else f"inconclusive ({session.inconclusive_reason})")
    return "\n".join([
        f"### Bisection of {session.cell} ({session.metric.value})",
        "",
        f"{len(session.commits)} commits, {session.probe_count} probes, {verdict}",
        "",
        _markdown(frame),
    ])


def render_nightly_markdown(
    nightly_commit: str,
    report: DetectionReport,
    sessions: Sequence = (),
    baseline_commit: Optional[str] = None,
) -> str:
    lines = [
        f"# Nightly performance report: {nightly_commit}",
        "",
        f"Baseline: previous accepted nightly{f' ({baseline_commit})' if baseline_commit else ''}. "
        "Ratios are observed / baseline.",
        "",
        f"Checked cells: {report.checked_cells}; findings: {len(report.findings)}; "
        f"new cells: {len(report.new_cells)}",
        "",
        "## Findings",
        "",
        render_findings_table(report),
    ]
    if report.new_cells:
        lines += ["", "New cells (no baseline yet): " + ", ".join(report.new_cells)]
    if sessions:
        lines += ["", "## Bisection", ""]
        for session in sessions:
            lines += [render_probe_log(session), ""]
    return "\n".join(lines).rstrip() + "\n"

#!/usr/bin/env python3
"""
bench-sentry
Benchmark harness and nightly regression sentinel command line.

Exit codes:
    0  success, no regression findings
    2  invalid arguments or configuration
    3  regression findings (reported and, when a webhook is configured, filed)
    4  findings could not be filed (webhook failure); reports are still on disk
    5  measurement failure
"""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

# Add project root to path for imports
project_root = Path(__file__).resolve().parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from utils.analytics import (  # noqa: E402
    breakdown_report,
    compare_platforms,
    compare_variants,
    speedup_summary,
)
from utils.bisection import (  # noqa: E402
    BisectionSession,
    CommandBuildProvider,
    ProbeCache,
    WorkloadMeasureProvider,
    bisect,
    load_commits,
    load_history,
)
from utils.config import CliConfig, load_config  # noqa: E402
from utils.errors import (  # noqa: E402
    BatchSearchError,
    BenchSentryError,
    ConfigError,
    MeasurementFailure,
    NoFeasibleBatchError,
    UnsupportedCellError,
    WebhookError,
    WorkloadOOMError,
)
from utils.measurement import (  # noqa: E402
    BatchSizeCache,
    CellStatus,
    Reduction,
    RunConfig,
    SPEEDUP_REPEATS,
    WorkloadRunner,
    measure,
    run_batch_search,
    run_matrix,
)
from utils.notifications import build_issue_payload, file_issue  # noqa: E402
from utils.regression import (  # noqa: E402
    BaselineStore,
    DetectionReport,
    Metric,
    cell_id,
    detect_regressions,
    metric_field,
    update_baseline,
)
from utils.reports import (  # noqa: E402
    breakdown_csv,
    breakdown_record,
    comparison_record,
    findings_record,
    load_measurements,
    matrix_record,
    measurement_record,
    render_breakdown_markdown,
    render_comparison_markdown,
    render_matrix_markdown,
    render_nightly_markdown,
    render_platform_markdown,
    render_probe_log,
    write_json,
    write_raw_runs,
    write_text,
)
from utils.trace_analysis import decompose_file, decomposition_summary  # noqa: E402
from utils.workloads import load_registry  # noqa: E402

logger = logging.getLogger("bench_sentry")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FINDINGS = 3
EXIT_WEBHOOK = 4
EXIT_MEASUREMENT = 5


def _batch_size(raw: str):
    if raw == "auto":
        return "auto"
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"batch size must be a positive integer or 'auto', got {raw!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"batch size must be >= 1, got {value}")
    return value


def _emit(args, payload: Dict) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, default=str))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _select_workloads(config: CliConfig, names: Optional[List[str]]):
    config.require_paths(registry=True)
    registry = load_registry(config.registry)
    if not registry:
        raise ConfigError(f"No workloads registered in {config.registry}")
    if not names:
        return registry, list(registry.values())
    unknown = [name for name in names if name not in registry]
    if unknown:
        raise ConfigError(f"Unknown workload(s): {', '.join(unknown)}")
    return registry, [registry[name] for name in names]


def _bs_cache(config: CliConfig) -> Optional[BatchSizeCache]:
    return BatchSizeCache(config.batch_size_cache) if config.batch_size_cache else None


def _base_config(args, config: CliConfig) -> RunConfig:
    reduction = Reduction(getattr(args, "reduction", Reduction.MEDIAN_RUN.value))
    repeats = config.repeats
    # Speedup means default to 20 repeats unless a repeat count was configured
    if reduction is Reduction.ARITHMETIC_MEAN and "repeats" not in config.model_fields_set:
        repeats = SPEEDUP_REPEATS
    return RunConfig(
        batch_size=getattr(args, "bs", "auto") or "auto",
        repeats=repeats,
        reduction=reduction,
        precision=getattr(args, "precision", "fp32"),
    )


def _commit_list(args, history) -> List[str]:
    if args.commits:
        return load_commits(args.commits)
    if history is not None:
        return list(history.commit_ids())
    return []


def _build_provider(config: CliConfig, history):
    if history is not None:
        return history
    if config.build_command:
        return CommandBuildProvider(config.build_command)
    return None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args, config: CliConfig) -> int:
    _, specs = _select_workloads(config, [args.workload])
    spec = specs[0]
    runner = WorkloadRunner(timeout_s=config.timeout_s, trace_dir=config.output_dir / "traces")

    batch_size = args.bs
    if batch_size == "auto":
        if args.mode == "train":
            batch_size = spec.default_train_batch_size
        else:
            cache = _bs_cache(config)
            batch_size = cache.get(spec.name, args.device) if cache else None
            if batch_size is None:
                batch_size = run_batch_search(spec, "eval", args.device, runner=runner).batch_size
                if cache:
                    cache.put(spec.name, args.device, batch_size)

    run_config = _base_config(args, config).model_copy(update={
        "mode": args.mode,
        "device": args.device,
        "batch_size": batch_size,
        "trace": args.trace or args.device == "gpu",
    })
    print(f"🔍 Measuring {spec.name} {args.mode}/{args.device} bs={batch_size} x{run_config.repeats}")
    result = measure(spec, run_config, runner=runner)

    write_json(config.output_dir / "measurement.json", "measurement", measurement_record(result))
    write_raw_runs(config.output_dir, [result])

    metrics = result.aggregate
    print(f"✅ wall_time={metrics['wall_time']:.0f} us  peak_cpu_mem={metrics['peak_cpu_mem']:.0f} B  "
          f"peak_gpu_mem={metrics['peak_gpu_mem']:.0f} B")
    if result.degraded:
        print(f"⚠️ {result.failed_runs} run(s) failed; result marked degraded")
    if result.decomposition is not None:
        d = result.decomposition
        print(f"   active={d.active_fraction:.3f} movement={d.movement_fraction:.3f} idle={d.idle_fraction:.3f}")
    _emit(args, measurement_record(result))
    return EXIT_OK


def cmd_matrix(args, config: CliConfig) -> int:
    _, specs = _select_workloads(config, args.workload)
    runner = WorkloadRunner(timeout_s=config.timeout_s, trace_dir=config.output_dir / "traces")
    base = _base_config(args, config)

    matrices = []
    for spec in specs:
        print(f"🔍 {spec.name}")
        matrices.append(run_matrix(spec, base, runner, config.available_devices, _bs_cache(config)))

    measurements = [m for matrix in matrices for m in matrix.measurements()]
    write_json(config.output_dir / "matrix.json", "matrix", {"matrices": [matrix_record(m) for m in matrices]})
    write_text(config.output_dir / "matrix.md", render_matrix_markdown(matrices))
    write_raw_runs(config.output_dir, measurements)

    print(render_matrix_markdown(matrices))
    _emit(args, {"matrices": [matrix_record(m) for m in matrices]})
    if not measurements:
        print("❌ No cell could be measured")
        return EXIT_MEASUREMENT
    print(f"📝 Reports written to {config.output_dir}")
    return EXIT_OK


def cmd_bsearch(args, config: CliConfig) -> int:
    _, specs = _select_workloads(config, [args.workload])
    spec = specs[0]
    runner = WorkloadRunner(timeout_s=config.timeout_s, trace_dir=config.output_dir / "traces")

    result = run_batch_search(spec, "eval", args.device, runner=runner, cap=args.cap, precision=args.precision)
    for probe in result.probes:
        score = f"{probe.score:.4f}" if probe.score is not None else "-"
        print(f"   bs={probe.batch_size:<6} {probe.exit_class.value:<15} {result.score_metric}={score}")
    print(f"✅ {spec.name}/{args.device}: batch size {result.batch_size}")

    cache = _bs_cache(config)
    if cache:
        cache.put(spec.name, args.device, result.batch_size)
    _emit(args, json.loads(result.model_dump_json()))
    return EXIT_OK


def cmd_decompose(args, config: CliConfig) -> int:
    decomposition = decompose_file(args.trace, args.wall_time)
    summary = decomposition_summary(decomposition)
    if args.json:
        _emit(args, summary)
    else:
        print(f"active   {decomposition.active_fraction:.4f}")
        print(f"movement {decomposition.movement_fraction:.4f}")
        print(f"idle     {decomposition.idle_fraction:.4f}")
    return EXIT_OK


def cmd_compare(args, config: CliConfig) -> int:
    baseline = load_measurements(args.baseline_dir)
    candidate = load_measurements(args.candidate_dir)
    label_a, label_b = args.labels

    if args.platform:
        comparison = compare_platforms(baseline, candidate, label_a, label_b, device=args.device)
        record = json.loads(comparison.model_dump_json())
        markdown = render_platform_markdown(comparison)
    else:
        comparison = compare_variants(baseline, candidate, label_a, label_b)
        record = comparison_record(comparison)
        markdown = render_comparison_markdown(comparison)
        if args.speedup:
            candidates = {m.cell: m for m in candidate}
            record["speedups"] = {
                cell_id(*m.cell): speedup_summary(m, candidates[m.cell])
                for m in baseline if m.cell in candidates
            }
            for cell, value in record["speedups"].items():
                print(f"   {cell}: mean speedup {value:.2f}x")

    write_json(config.output_dir / "comparison.json", "comparison", record)
    write_text(config.output_dir / "comparison.md", markdown)
    print(markdown)
    _emit(args, record)
    return EXIT_OK


def cmd_detect(args, config: CliConfig) -> int:
    config.require_paths(registry=False, baseline_store=True)
    observed = load_measurements(args.observed)
    store = BaselineStore(config.baseline_store)
    with store.lock():
        baseline = store.load()
        report = detect_regressions(baseline, observed, config.policy)
        if args.accept:
            store.save(update_baseline(baseline, observed, report.findings, args.accept))

    _print_findings(report)
    write_json(config.output_dir / "findings.json", "findings", findings_record(report))
    _emit(args, findings_record(report))
    return EXIT_OK if report.clean else EXIT_FINDINGS


def cmd_bisect(args, config: CliConfig) -> int:
    history = load_history(args.history) if args.history else None
    commits = _commit_list(args, history)
    if not commits:
        raise ConfigError("bisect needs --commits or --history")
    build_provider = _build_provider(config, history)
    if build_provider is None:
        raise ConfigError("bisect needs --history or a build command (--build-command)")

    metric = Metric(args.metric)
    baseline_value = args.baseline_value
    good_commit = args.good_commit
    if baseline_value is None:
        baseline = BaselineStore(config.baseline_store).load()
        if baseline is not None and args.cell in baseline.cells:
            baseline_value = baseline.cells[args.cell].value(metric)
            good_commit = good_commit or baseline.commit
        elif history is not None:
            baseline_value = history.baseline_metrics[metric_field(metric)]
        else:
            raise ConfigError(f"No baseline value for {args.cell}; pass --baseline-value")

    if history is not None:
        measure_provider = history
    else:
        registry, _ = _select_workloads(config, None)
        measure_provider = WorkloadMeasureProvider(registry, _base_config(args, config), timeout_s=config.timeout_s)

    session = BisectionSession(
        commits=tuple(commits),
        cell=args.cell,
        metric=metric,
        baseline_value=baseline_value,
        good_commit=good_commit,
    )
    print(f"🔍 Bisecting {args.cell} ({metric.value}) over {len(commits)} commits")
    result = bisect(session, build_provider, measure_provider, config.policy)

    write_json(config.output_dir / "bisection.json", "bisection", json.loads(result.model_dump_json()))
    write_text(config.output_dir / "bisection.md", render_probe_log(result) + "\n")
    if result.culprit:
        print(f"✅ Culprit: {result.culprit} ({result.probe_count} probes)")
    else:
        print(f"⚠️ Inconclusive: {result.inconclusive_reason}")
    _emit(args, json.loads(result.model_dump_json()))
    return EXIT_OK


def cmd_report(args, config: CliConfig) -> int:
    measurements = load_measurements(args.source)
    domains: Dict[str, str] = {}
    if config.registry.is_dir():
        domains = {name: spec.domain for name, spec in load_registry(config.registry).items()}

    entries = [
        (m.workload, domains.get(m.workload, "unknown"), m.config.mode, m.decomposition)
        for m in measurements
        if m.decomposition is not None
    ]
    if not entries:
        raise ConfigError(f"No trace decompositions among the measurements in {args.source}")

    table = breakdown_report(entries)
    write_json(config.output_dir / "breakdown.json", "breakdown", breakdown_record(table))
    write_text(config.output_dir / "breakdown.md", render_breakdown_markdown(table))
    breakdown_csv(table, config.output_dir / "breakdown.csv")
    print(render_breakdown_markdown(table))
    _emit(args, breakdown_record(table))
    return EXIT_OK


def _print_findings(report: DetectionReport) -> None:
    if report.clean:
        print(f"✅ No regressions across {report.checked_cells} cells")
    for finding in report.findings:
        culprit = f" culprit={finding.culprit}" if finding.culprit else ""
        print(f"⚠️ {finding.cell} {finding.metric.value}: "
              f"{finding.baseline_value:.0f} -> {finding.observed_value:.0f} (x{finding.ratio:.3f}){culprit}")
    if report.new_cells:
        print(f"📝 {len(report.new_cells)} new cell(s) added to the baseline")


def cmd_ci_nightly(args, config: CliConfig) -> int:
    config.require_paths(baseline_store=True)
    _, specs = _select_workloads(config, args.workload)
    registry = {spec.name: spec for spec in specs}
    out_dir = config.output_dir
    history = load_history(args.history, artifact_dir=out_dir / "artifacts") if args.history else None
    commits = _commit_list(args, history)
    build_provider = _build_provider(config, history)
    nightly = args.commit or (commits[-1] if commits else None)
    if nightly is None:
        raise ConfigError("ci-nightly needs --commit, --commits or --history")

    artifact = None
    if build_provider is not None:
        try:
            built = build_provider.build(nightly)
        except Exception as exc:
            raise MeasurementFailure(f"nightly commit {nightly} could not be built: {exc}") from exc
        if not built.buildable:
            raise MeasurementFailure(f"nightly commit {nightly} could not be built: {built.reason}")
        artifact = Path(built.artifact)

    print(f"🔍 Nightly {nightly}: measuring {len(specs)} workload(s)")
    runner = WorkloadRunner(timeout_s=config.timeout_s, trace_dir=out_dir / "traces", artifact=artifact)
    base = _base_config(args, config)
    matrices = [run_matrix(spec, base, runner, config.available_devices, _bs_cache(config)) for spec in specs]
    measurements = [m for matrix in matrices for m in matrix.measurements()]
    for matrix in matrices:
        for cell in matrix.cells:
            if cell.status is CellStatus.FAILED:
                print(f"⚠️ {matrix.workload} {cell.mode}/{cell.device} failed: {cell.reason}")
    if not measurements:
        write_json(out_dir / "matrix.json", "matrix", {"matrices": [matrix_record(m) for m in matrices]})
        print("❌ No cell could be measured")
        return EXIT_MEASUREMENT

    batch_sizes = {
        cell_id(matrix.workload, cell.mode, cell.device): cell.batch_size
        for matrix in matrices for cell in matrix.cells
        if cell.status is CellStatus.MEASURED
    }

    store = BaselineStore(config.baseline_store)
    sessions: List[BisectionSession] = []
    with store.lock():
        baseline = store.load()
        report = detect_regressions(baseline, matrices, config.policy)

        if report.findings and commits and build_provider is not None:
            measure_provider = WorkloadMeasureProvider(registry, base, batch_sizes, timeout_s=config.timeout_s)
            cache = ProbeCache()
            for cell in report.flagged_cells():
                finding = next(f for f in report.findings if f.cell == cell)
                print(f"🔍 Bisecting {cell} ({finding.metric.value})")
                sessions.append(bisect(
                    BisectionSession(
                        commits=tuple(commits),
                        cell=cell,
                        metric=finding.metric,
                        baseline_value=finding.baseline_value,
                        good_commit=baseline.commit if baseline else None,
                    ),
                    build_provider,
                    measure_provider,
                    config.policy,
                    cache,
                ))
            culprits = {s.cell: s.culprit for s in sessions}
            report = report.model_copy(update={
                "findings": tuple(f.with_culprit(culprits.get(f.cell)) for f in report.findings),
            })
        elif report.findings:
            logger.warning("No commit range or build provider; skipping bisection")

        store.save(update_baseline(baseline, matrices, report.findings, nightly))

    baseline_commit = baseline.commit if baseline else None
    write_json(out_dir / "matrix.json", "matrix", {"matrices": [matrix_record(m) for m in matrices]})
    write_raw_runs(out_dir, measurements)
    write_json(out_dir / "nightly.json", "nightly", {
        "nightly_commit": nightly,
        "baseline_commit": baseline_commit,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        **findings_record(report, sessions),
    })
    write_text(out_dir / "nightly.md", render_nightly_markdown(nightly, report, sessions, baseline_commit))
    _print_findings(report)
    print(f"📝 Reports written to {out_dir}")

    if report.clean:
        return EXIT_OK

    if config.webhook_url:
        payload = build_issue_payload(nightly, report, sessions, baseline_commit)
        try:
            file_issue(config.webhook_url, payload, config.webhook_token())
        except WebhookError as exc:
            print(f"❌ Could not file the regression issue: {exc}")
            return EXIT_WEBHOOK
        print(f"✅ Regression issue filed: {payload.title}")
    return EXIT_FINDINGS


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (default: ./bench_sentry.toml when present)")
    common.add_argument("--registry", help="Workload registry directory")
    common.add_argument("--baseline", help="Baseline store directory")
    common.add_argument("--out", help="Output directory for reports")
    common.add_argument("--repeats", type=int, help="Repeated runs per cell")
    common.add_argument("--devices", help="Comma-separated available devices, e.g. cpu,gpu")
    common.add_argument("--timeout", type=float, help="Per-run timeout in seconds")
    common.add_argument("--threshold", type=float, help="Relative wall-time regression threshold")
    common.add_argument("--json", action="store_true", help="Also print the JSON result to stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="bench-sentry",
        description="Benchmark harness and nightly performance regression sentinel",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="Measure one workload cell")
    run.add_argument("--workload", required=True)
    run.add_argument("--mode", choices=["train", "eval"], default="eval")
    run.add_argument("--device", choices=["cpu", "gpu"], default="cpu")
    run.add_argument("--bs", type=_batch_size, default="auto")
    run.add_argument("--reduction", choices=[r.value for r in Reduction], default=Reduction.MEDIAN_RUN.value)
    run.add_argument("--precision", default="fp32")
    run.add_argument("--trace", action="store_true", help="Request a trace on cpu runs too")
    run.set_defaults(handler=cmd_run)

    matrix = sub.add_parser("matrix", parents=[common], help="Measure the train/eval x cpu/gpu matrix")
    matrix.add_argument("--workload", action="append", help="Repeatable; default all registered")
    matrix.add_argument("--bs", type=_batch_size, default="auto", help="Eval batch size")
    matrix.set_defaults(handler=cmd_matrix)

    bsearch = sub.add_parser("bsearch", parents=[common], help="Batch-size doubling search for eval")
    bsearch.add_argument("--workload", required=True)
    bsearch.add_argument("--device", choices=["cpu", "gpu"], default="gpu")
    bsearch.add_argument("--cap", type=int, default=2 ** 15)
    bsearch.add_argument("--precision", default="fp32")
    bsearch.set_defaults(handler=cmd_bsearch)

    decompose = sub.add_parser("decompose", parents=[common], help="Decompose a Chrome trace")
    decompose.add_argument("trace")
    decompose.add_argument("--wall-time", type=int, required=True, help="Run wall time in microseconds")
    decompose.set_defaults(handler=cmd_decompose)

    compare = sub.add_parser("compare", parents=[common], help="Compare two measurement directories")
    compare.add_argument("baseline_dir")
    compare.add_argument("candidate_dir")
    compare.add_argument("--labels", nargs=2, default=["baseline", "candidate"], metavar=("A", "B"))
    compare.add_argument("--platform", action="store_true", help="Platform comparison (T_A / T_B per mode)")
    compare.add_argument("--device", choices=["cpu", "gpu"], default="gpu")
    compare.add_argument("--speedup", action="store_true", help="Mean per-run speedups per common cell")
    compare.set_defaults(handler=cmd_compare)

    detect = sub.add_parser("detect", parents=[common], help="Check measurements against the baseline")
    detect.add_argument("observed", help="Directory with measurements.jsonl")
    detect.add_argument("--accept", metavar="COMMIT", help="Advance the baseline to these measurements")
    detect.set_defaults(handler=cmd_detect)

    bisect_cmd = sub.add_parser("bisect", parents=[common], help="Find the first regressing commit")
    bisect_cmd.add_argument("--cell", required=True, help="workload/mode/device")
    bisect_cmd.add_argument("--metric", choices=[m.value for m in Metric], default=Metric.WALL_TIME.value)
    bisect_cmd.add_argument("--commits", help="File of '<commit> <ISO timestamp>' lines")
    bisect_cmd.add_argument("--history", help="Simulated history JSON")
    bisect_cmd.add_argument("--good-commit")
    bisect_cmd.add_argument("--baseline-value", type=float)
    bisect_cmd.add_argument("--build-command", help="Build template containing {commit}")
    bisect_cmd.set_defaults(handler=cmd_bisect)

    nightly = sub.add_parser("ci-nightly", parents=[common], help="Nightly measure, detect, bisect and file")
    nightly.add_argument("--workload", action="append")
    nightly.add_argument("--commit", help="Nightly commit id (default: last commit of the range)")
    nightly.add_argument("--commits", help="File of '<commit> <ISO timestamp>' lines since the last nightly")
    nightly.add_argument("--history", help="Simulated history JSON")
    nightly.add_argument("--bs", type=_batch_size, default="auto", help="Eval batch size")
    nightly.add_argument("--webhook-url")
    nightly.add_argument("--build-command", help="Build template containing {commit}")
    nightly.set_defaults(handler=cmd_ci_nightly)

    report = sub.add_parser("report", parents=[common], help="Execution-time breakdown from saved measurements")
    report.add_argument("source", help="Directory with measurements.jsonl")
    report.set_defaults(handler=cmd_report)

    return parser


def _overrides(args) -> Dict:
    return {
        "registry": args.registry,
        "baseline_store": args.baseline,
        "output_dir": args.out,
        "repeats": args.repeats,
        "available_devices": args.devices,
        "timeout_s": args.timeout,
        "time_threshold": args.threshold,
        "webhook_url": getattr(args, "webhook_url", None),
        "build_command": getattr(args, "build_command", None),
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = load_config(args.config, overrides=_overrides(args))
        return args.handler(args, config)
    except (ConfigError, UnsupportedCellError, FileNotFoundError, ValueError) as exc:
        print(f"❌ {exc}")
        return EXIT_CONFIG
    except (WorkloadOOMError, MeasurementFailure, NoFeasibleBatchError, BatchSearchError) as exc:
        print(f"❌ Measurement failed: {exc}")
        return EXIT_MEASUREMENT
    except WebhookError as exc:
        print(f"❌ {exc}")
        return EXIT_WEBHOOK
    except BenchSentryError as exc:
        print(f"❌ {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Synthetic workload executable
Implements the workload protocol for the built-in synthetic models. Behaviour is fully
deterministic for a given request, run index (BENCH_RUN_INDEX) and artifact (BENCH_ARTIFACT).

Artifact files are JSON objects with optional keys ``wall_time_scale``, ``mem_scale`` and
``leak_bytes``; they stand in for a build of the framework under test.

Set BENCH_SYNTH_SLEEP=0 to skip the sleep that imitates the computation region.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

# Add project root to path for imports
project_root = Path(__file__).resolve().parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from utils.trace_analysis import Decomposition  # noqa: E402
from utils.trace_synthesis import emit_synthetic_trace  # noqa: E402
from utils.workloads import ARTIFACT_ENV, RUN_INDEX_ENV, get_builtin_workload  # noqa: E402

TRACE_EVENTS = 12


def _load_artifact() -> dict:
    artifact = os.getenv(ARTIFACT_ENV)
    if not artifact:
        return {}
    path = Path(artifact)
    if not path.is_file():
        return {}
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError:
        return {}
    return data if isinstance(data, dict) else {}


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Built-in synthetic workload")
    parser.add_argument("--workload", required=True)
    parser.add_argument("--mode", choices=["train", "eval"], required=True)
    parser.add_argument("--device", choices=["cpu", "gpu"], required=True)
    parser.add_argument("--bs", type=int, required=True)
    parser.add_argument("--iterations", type=int, default=1)
    parser.add_argument("--precision", default="fp32")
    parser.add_argument("--trace-out", default=None)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    spec = get_builtin_workload(args.workload)
    model = spec.synthetic

    if model.is_oom(args.bs):
        print(f"out of memory at batch size {args.bs}", file=sys.stderr)
        return spec.oom_exit_code

    artifact = _load_artifact()
    run_index = int(os.getenv(RUN_INDEX_ENV, "0") or 0)

    wall_time = model.wall_time(
        args.mode,
        args.bs,
        iterations=args.iterations,
        run_index=run_index,
        scale=float(artifact.get("wall_time_scale", 1.0)),
    )
    mem_scale = float(artifact.get("mem_scale", 1.0))
    peak_cpu, peak_gpu = model.memory(args.device, args.bs, scale=mem_scale)
    resident = model.resident_mem + int(artifact.get("leak_bytes", 0))

    if os.getenv("BENCH_SYNTH_SLEEP", "1") != "0":
        time.sleep(wall_time / 1_000_000)

    record = {
        "wall_time_us": wall_time,
        "peak_cpu_mem_bytes": peak_cpu,
        "peak_gpu_mem_bytes": peak_gpu,
        "post_run_resident_bytes": resident,
    }

    if args.trace_out and args.device == "gpu":
        active_us, movement_us, idle_us = model.split_wall_time(args.bs, wall_time)
        target = Decomposition(
            active_fraction=active_us / wall_time,
            movement_fraction=movement_us / wall_time,
            idle_fraction=idle_us / wall_time,
        )
        path = emit_synthetic_trace(
            target, wall_time, TRACE_EVENTS, model.deterministic_seed + args.bs, args.trace_out
        )
        record["trace_path"] = str(path)

    print(json.dumps(record))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""
Workload Protocol
Contract between the harness and an executable benchmark, the built-in synthetic
workloads, and the on-disk workload registry.

A workload is any executable that accepts
    --mode <train|eval> --device <cpu|gpu> --bs <N> --iterations <N> --precision <label> [--trace-out <path>]
times only its computation region, and prints one JSON result record as the last line
of stdout. Exit code 0 means ok, ``oom_exit_code`` (42 by default) means out of memory.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import shutil
import subprocess
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError, UnsupportedCellError, WorkloadLaunchError

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]
Device = Literal["cpu", "gpu"]

MODES: Tuple[str, ...] = ("train", "eval")
DEVICES: Tuple[str, ...] = ("cpu", "gpu")

DEFAULT_OOM_EXIT_CODE = 42
DEFAULT_TIMEOUT_S = 600.0

RUN_INDEX_ENV = "BENCH_RUN_INDEX"
ARTIFACT_ENV = "BENCH_ARTIFACT"

SYNTHETIC_WORKLOAD_SCRIPT = Path(__file__).resolve().parent / "synthetic_workload.py"
WORKLOAD_FILE_SUFFIX = ".workload"

MiB = 1024 * 1024


class ExitClass(str, Enum):
    OK = "ok"
    OOM = "oom"
    PROTOCOL_ERROR = "protocol_error"
    WORKLOAD_ERROR = "workload_error"


class SyntheticWorkloadModel(BaseModel):
    """Deterministic behaviour of a built-in workload"""

    model_config = ConfigDict(frozen=True)

    util_curve: Dict[int, float]
    oom_threshold: int = Field(gt=0)
    base_wall_time: int = Field(gt=0, description="microseconds at batch size 0")
    deterministic_seed: int = 0
    per_sample_time: int = Field(default=0, ge=0, description="microseconds added per sample")
    train_time_factor: int = Field(default=3, ge=1)
    noise: float = Field(default=0.0, ge=0.0, lt=1.0)
    movement_share: float = Field(default=0.2, ge=0.0, le=1.0)
    base_cpu_mem: int = 64 * MiB
    per_sample_cpu_mem: int = 256 * 1024
    base_gpu_mem: int = 128 * MiB
    per_sample_gpu_mem: int = MiB
    resident_mem: int = 32 * MiB

    @field_validator("util_curve")
    @classmethod
    def _utilization_in_unit_range(cls, curve: Dict[int, float]) -> Dict[int, float]:
        for bs, util in curve.items():
            if bs < 1 or not 0.0 <= util <= 1.0:
                raise ValueError(f"util_curve entry {bs}: {util} outside [1, inf) x [0, 1]")
        return curve

    @model_validator(mode="after")
    def _curve_covers_doubling_schedule(self) -> "SyntheticWorkloadModel":
        bs = 1
        while bs < self.oom_threshold and bs <= 2 ** 15:
            if bs not in self.util_curve:
                raise ValueError(f"util_curve has no entry for probed batch size {bs}")
            bs *= 2
        return self

    def is_oom(self, batch_size: int) -> bool:
        return batch_size >= self.oom_threshold

    def utilization(self, batch_size: int) -> float:
        if batch_size in self.util_curve:
            return self.util_curve[batch_size]
        # Between doubling points: hold the nearest lower entry
        lower = [bs for bs in self.util_curve if bs <= batch_size]
        return self.util_curve[max(lower)] if lower else 0.0

    def wall_time(
        self,
        mode: str,
        batch_size: int,
        iterations: int = 1,
        run_index: int = 0,
        scale: float = 1.0,
    ) -> int:
        per_iteration = self.base_wall_time + self.per_sample_time * batch_size
        if mode == "train":
            per_iteration *= self.train_time_factor
        jitter = 1.0
        if self.noise > 0:
            rng = np.random.default_rng([self.deterministic_seed, batch_size, run_index])
            jitter = 1.0 + self.noise * float(rng.uniform(-1.0, 1.0))
        return max(1, int(round(per_iteration * iterations * jitter * scale)))

    def memory(self, device: str, batch_size: int, scale: float = 1.0) -> Tuple[int, int]:
        peak_cpu = self.base_cpu_mem + self.per_sample_cpu_mem * batch_size
        peak_gpu = 0
        if device == "gpu":
            peak_gpu = self.base_gpu_mem + self.per_sample_gpu_mem * batch_size
        return int(peak_cpu * scale), int(peak_gpu * scale)

    def split_wall_time(self, batch_size: int, wall_time: int) -> Tuple[int, int, int]:
        """Integer active / movement / idle microseconds for a synthetic trace"""
        util = self.utilization(batch_size)
        active_us = int(round(util * wall_time))
        movement_us = int(round((1.0 - util) * self.movement_share * wall_time))
        movement_us = min(movement_us, wall_time - active_us)
        return active_us, movement_us, wall_time - active_us - movement_us


class WorkloadSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.\-]+$")
    domain: str = "unspecified"
    supported_modes: FrozenSet[Mode]
    supported_devices: FrozenSet[Device]
    default_train_batch_size: int = Field(ge=1)
    executable: Tuple[str, ...] = Field(min_length=1)
    oom_exit_code: int = DEFAULT_OOM_EXIT_CODE
    synthetic: Optional[SyntheticWorkloadModel] = None

    @field_validator("supported_modes", "supported_devices")
    @classmethod
    def _non_empty(cls, value: FrozenSet[str]) -> FrozenSet[str]:
        if not value:
            raise ValueError("capability set must not be empty")
        return value

    def supports(self, mode: str, device: str) -> bool:
        return mode in self.supported_modes and device in self.supported_devices


class RunRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Mode
    device: Device
    batch_size: int = Field(ge=1)
    iterations: int = Field(default=1, ge=1)
    precision: str = "fp32"
    trace_requested: bool = False


class RunResult(BaseModel):
    """Metrics for the computation region of one workload run (times in microseconds)"""

    model_config = ConfigDict(frozen=True)

    exit_class: ExitClass
    wall_time: Optional[int] = None
    peak_cpu_mem: Optional[int] = None
    peak_gpu_mem: Optional[int] = None
    post_run_resident_mem: Optional[int] = None
    trace_path: Optional[str] = None
    timed_out: bool = False
    detail: str = ""

    @model_validator(mode="after")
    def _metrics_match_exit_class(self) -> "RunResult":
        if self.exit_class is ExitClass.OK:
            if self.wall_time is None or self.wall_time <= 0:
                raise ValueError("ok run needs wall_time > 0")
            for field in ("peak_cpu_mem", "peak_gpu_mem", "post_run_resident_mem"):
                value = getattr(self, field)
                if value is None or value < 0:
                    raise ValueError(f"ok run needs {field} >= 0")
        return self

    @property
    def ok(self) -> bool:
        return self.exit_class is ExitClass.OK

    def metrics(self) -> Dict[str, Optional[int]]:
        return {
            "wall_time": self.wall_time,
            "peak_cpu_mem": self.peak_cpu_mem,
            "peak_gpu_mem": self.peak_gpu_mem,
            "post_run_resident_mem": self.post_run_resident_mem,
        }


def _doubling_curve(values: List[float]) -> Dict[int, float]:
    return {2 ** i: value for i, value in enumerate(values)}


def _builtin_executable(name: str) -> Tuple[str, ...]:
    return (sys.executable, str(SYNTHETIC_WORKLOAD_SCRIPT), "--workload", name)


def _builtin(name: str, domain: str, default_train_batch_size: int,
             model: SyntheticWorkloadModel,
             modes=MODES, devices=DEVICES) -> WorkloadSpec:
    return WorkloadSpec(
        name=name,
        domain=domain,
        supported_modes=frozenset(modes),
        supported_devices=frozenset(devices),
        default_train_batch_size=default_train_batch_size,
        executable=_builtin_executable(name),
        synthetic=model,
    )


def list_builtin_workloads() -> List[WorkloadSpec]:
    """
    Built-in synthetic workloads:
      synth-conv    concave utilization peaking at bs=64, OOM at bs>=512
      synth-matmul  monotone increasing utilization, OOM at bs>=32
      synth-const   constant 7000 us per iteration regardless of batch size
      synth-noisy   seeded +/-10% per-run jitter around 10 ms
      synth-oom     OOMs at every batch size (oom_threshold=1)
    """
    return [
        _builtin("synth-conv", "computer-vision", 32, SyntheticWorkloadModel(
            util_curve=_doubling_curve([0.10, 0.18, 0.30, 0.45, 0.60, 0.75, 0.90, 0.82, 0.70]),
            oom_threshold=512,
            base_wall_time=20000,
            per_sample_time=80,
            deterministic_seed=11,
        )),
        _builtin("synth-matmul", "recommendation", 8, SyntheticWorkloadModel(
            util_curve=_doubling_curve([0.20, 0.35, 0.50, 0.65, 0.80]),
            oom_threshold=32,
            base_wall_time=5000,
            per_sample_time=150,
            deterministic_seed=23,
        )),
        _builtin("synth-const", "microbenchmark", 16, SyntheticWorkloadModel(
            util_curve=_doubling_curve([0.5] * 16),
            oom_threshold=2 ** 16,
            base_wall_time=7000,
            per_sample_time=0,
            train_time_factor=1,
            deterministic_seed=7,
        )),
        _builtin("synth-noisy", "natural-language-processing", 4, SyntheticWorkloadModel(
            util_curve=_doubling_curve([0.15, 0.25, 0.40, 0.55, 0.62, 0.66, 0.68]),
            oom_threshold=128,
            base_wall_time=10000,
            per_sample_time=20,
            noise=0.10,
            deterministic_seed=97,
        )),
        _builtin("synth-oom", "microbenchmark", 1, SyntheticWorkloadModel(
            util_curve={},
            oom_threshold=1,
            base_wall_time=1000,
            deterministic_seed=1,
        )),
    ]


def get_builtin_workload(name: str) -> WorkloadSpec:
    for spec in list_builtin_workloads():
        if spec.name == name:
            return spec
    raise KeyError(f"No built-in workload named {name!r}")


def build_argv(spec: WorkloadSpec, req: RunRequest, trace_out: Optional[Path] = None) -> List[str]:
    argv = list(spec.executable) + [
        "--mode", req.mode,
        "--device", req.device,
        "--bs", str(req.batch_size),
        "--iterations", str(req.iterations),
        "--precision", req.precision,
    ]
    if trace_out is not None:
        argv += ["--trace-out", str(trace_out)]
    return argv


_RECORD_KEYS = ("wall_time_us", "peak_cpu_mem_bytes", "peak_gpu_mem_bytes", "post_run_resident_bytes")


def parse_result_record(stdout: str) -> Optional[Dict[str, Any]]:
    """Return the result record from the last non-empty stdout line, or None if malformed"""
    lines = [line.strip() for line in stdout.splitlines() if line.strip()]
    if not lines:
        return None
    try:
        record = json.loads(lines[-1])
    except json.JSONDecodeError:
        return None
    if not isinstance(record, dict):
        return None
    for key in _RECORD_KEYS:
        value = record.get(key)
        if isinstance(value, bool) or not isinstance(value, int):
            return None
    trace_path = record.get("trace_path")
    if trace_path is not None and not isinstance(trace_path, str):
        return None
    return record


def _resolve_executable(program: str) -> str:
    if os.sep in program or (os.altsep and os.altsep in program):
        if not Path(program).exists():
            raise WorkloadLaunchError(f"Workload executable not found: {program}")
        return program
    found = shutil.which(program)
    if found is None:
        raise WorkloadLaunchError(f"Workload executable not found on PATH: {program}")
    return found


def invoke_workload(
    spec: WorkloadSpec,
    req: RunRequest,
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    trace_dir: Optional[Path] = None,
    run_index: int = 0,
    artifact: Optional[Union[str, Path]] = None,
) -> RunResult:
    """Run one workload process and classify its outcome"""
    if not spec.supports(req.mode, req.device):
        raise UnsupportedCellError(
            f"{spec.name} does not support mode={req.mode} device={req.device}"
        )

    _resolve_executable(spec.executable[0])

    trace_out = None
    if req.trace_requested:
        if trace_dir is None:
            raise ValueError("trace_dir is required when a trace is requested")
        trace_root = Path(trace_dir)
        trace_root.mkdir(parents=True, exist_ok=True)
        trace_out = trace_root / f"{spec.name}-{req.mode}-{req.device}-bs{req.batch_size}-r{run_index}.json"

    env = dict(os.environ)
    env[RUN_INDEX_ENV] = str(run_index)
    if artifact is not None:
        env[ARTIFACT_ENV] = str(artifact)
    else:
        env.pop(ARTIFACT_ENV, None)

    argv = build_argv(spec, req, trace_out)
    logger.debug("Launching %s", shlex.join(argv))

    try:
        completed = subprocess.run(
            argv, capture_output=True, text=True, timeout=timeout_s, env=env
        )
    except subprocess.TimeoutExpired:
        logger.warning("%s timed out after %.0f s", spec.name, timeout_s)
        return RunResult(
            exit_class=ExitClass.WORKLOAD_ERROR,
            timed_out=True,
            detail=f"timed out after {timeout_s} s",
        )
    except OSError as exc:
        raise WorkloadLaunchError(f"Could not launch {spec.executable[0]}: {exc}") from exc

    stderr_tail = (completed.stderr or "")[-2000:]

    if completed.returncode == spec.oom_exit_code:
        return RunResult(exit_class=ExitClass.OOM, detail=stderr_tail)
    if completed.returncode != 0:
        return RunResult(
            exit_class=ExitClass.WORKLOAD_ERROR,
            detail=f"exit code {completed.returncode}: {stderr_tail}",
        )

    record = parse_result_record(completed.stdout or "")
    if record is None or record["wall_time_us"] <= 0 or min(record[k] for k in _RECORD_KEYS[1:]) < 0:
        return RunResult(
            exit_class=ExitClass.PROTOCOL_ERROR,
            detail=f"unparseable result record: {(completed.stdout or '')[-500:]!r}",
        )

    trace_path = record.get("trace_path")
    if trace_path is None and trace_out is not None and trace_out.exists():
        trace_path = str(trace_out)

    return RunResult(
        exit_class=ExitClass.OK,
        wall_time=record["wall_time_us"],
        peak_cpu_mem=record["peak_cpu_mem_bytes"],
        peak_gpu_mem=record["peak_gpu_mem_bytes"],
        post_run_resident_mem=record["post_run_resident_bytes"],
        trace_path=trace_path,
    )


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def _split_list(raw: Optional[str]) -> FrozenSet[str]:
    if not raw:
        return frozenset()
    return frozenset(part.strip().lower() for part in raw.split(",") if part.strip())


def parse_workload_file(path: Union[str, Path]) -> WorkloadSpec:
    """
    Parse a ``.workload`` key-value file.

    Keys: NAME, DOMAIN, MODES, DEVICES, DEFAULT_TRAIN_BATCH_SIZE, EXECUTABLE, OOM_EXIT_CODE, BUILTIN.
    ``BUILTIN`` starts from a built-in spec and lets the other keys override it.
    ``EXECUTABLE`` may use ``{python}`` and ``{registry}`` placeholders.
    """
    path = Path(path)
    values: Mapping[str, Optional[str]] = dotenv_values(path)

    fields: Dict[str, Any] = {}
    builtin_name = values.get("BUILTIN")
    if builtin_name:
        try:
            fields = get_builtin_workload(builtin_name).model_dump()
        except KeyError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    if values.get("NAME"):
        fields["name"] = values["NAME"]
    fields.setdefault("name", path.stem)
    if values.get("DOMAIN"):
        fields["domain"] = values["DOMAIN"]
    if values.get("MODES"):
        fields["supported_modes"] = _split_list(values["MODES"])
    if values.get("DEVICES"):
        fields["supported_devices"] = _split_list(values["DEVICES"])
    if values.get("EXECUTABLE"):
        command = values["EXECUTABLE"].format(python=sys.executable, registry=str(path.parent.resolve()))
        fields["executable"] = tuple(shlex.split(command))

    try:
        if values.get("DEFAULT_TRAIN_BATCH_SIZE"):
            fields["default_train_batch_size"] = int(values["DEFAULT_TRAIN_BATCH_SIZE"])
        if values.get("OOM_EXIT_CODE"):
            fields["oom_exit_code"] = int(values["OOM_EXIT_CODE"])
        return WorkloadSpec(**fields)
    except ValueError as exc:
        raise ConfigError(f"Invalid workload file {path}: {exc}") from exc


def load_registry(directory: Union[str, Path]) -> Dict[str, WorkloadSpec]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"Workload registry not found: {directory}")

    registry: Dict[str, WorkloadSpec] = {}
    for path in sorted(directory.glob(f"*{WORKLOAD_FILE_SUFFIX}")):
        spec = parse_workload_file(path)
        if spec.name in registry:
            raise ConfigError(f"Duplicate workload name {spec.name!r} in {path}")
        registry[spec.name] = spec
    logger.info("Loaded %d workloads from %s", len(registry), directory)
    return registry

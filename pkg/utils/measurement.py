"""
Measurement Discipline
Repeated runs with median-run selection, the train/eval x cpu/gpu configuration matrix,
and the batch-size doubling search for inference.
"""

from __future__ import annotations

import logging
import math
import tempfile
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values, set_key
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import (
    BatchSearchError,
    MeasurementFailure,
    NoFeasibleBatchError,
    TraceParseError,
    TraceValidationError,
    UnsupportedCellError,
    WorkloadLaunchError,
    WorkloadOOMError,
)
from .trace_analysis import Decomposition, decompose, parse_trace
from .workloads import (
    DEFAULT_TIMEOUT_S,
    DEVICES,
    MODES,
    Device,
    ExitClass,
    Mode,
    RunRequest,
    RunResult,
    WorkloadSpec,
    invoke_workload,
)

logger = logging.getLogger(__name__)

DEFAULT_REPEATS = 10
SPEEDUP_REPEATS = 20
DEFAULT_SEARCH_CAP = 2 ** 15
MIN_SURVIVING_RUNS = 3

METRIC_FIELDS = ("wall_time", "peak_cpu_mem", "peak_gpu_mem", "post_run_resident_mem")


class Reduction(str, Enum):
    MEDIAN_RUN = "median_run"
    ARITHMETIC_MEAN = "arithmetic_mean"


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Mode = "eval"
    device: Device = "cpu"
    batch_size: Union[int, Literal["auto"]] = "auto"
    repeats: int = Field(default=DEFAULT_REPEATS, ge=1)
    reduction: Reduction = Reduction.MEDIAN_RUN
    iterations: int = Field(default=1, ge=1)
    precision: str = "fp32"
    trace: bool = False

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if isinstance(self.batch_size, int) and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or 'auto'")
        if self.reduction is Reduction.ARITHMETIC_MEAN and self.repeats < 2:
            raise ValueError("arithmetic_mean reduction needs repeats >= 2")
        return self

    @property
    def resolved(self) -> bool:
        return self.batch_size != "auto"

    def request(self) -> RunRequest:
        if not self.resolved:
            raise ValueError("batch_size is still 'auto'; resolve it before measuring")
        return RunRequest(
            mode=self.mode,
            device=self.device,
            batch_size=self.batch_size,
            iterations=self.iterations,
            precision=self.precision,
            trace_requested=self.trace,
        )


class MeasurementSet(BaseModel):
    """All raw runs of one (workload, config) cell plus the reduced metrics"""

    model_config = ConfigDict(frozen=True)

    workload: str
    config: RunConfig
    runs: Tuple[RunResult, ...]
    selected_index: Optional[int] = None
    aggregate: Dict[str, float]
    degraded: bool = False
    failed_runs: int = 0
    decomposition: Optional[Decomposition] = None

    @property
    def cell(self) -> Tuple[str, str, str]:
        return (self.workload, self.config.mode, self.config.device)

    @property
    def selected(self) -> Optional[RunResult]:
        if self.selected_index is None:
            return None
        return self.runs[self.selected_index]

    @property
    def wall_times(self) -> List[int]:
        return [run.wall_time for run in self.runs if run.ok]


class WorkloadRunner:
    """
    Launches workload processes; one process at a time per runner.

    Without ``trace_dir`` traces go to a scratch directory owned by the runner and
    removed by ``close()`` (or on leaving a ``with`` block).
    """

    def __init__(
        self,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        trace_dir: Optional[Path] = None,
        artifact: Optional[Path] = None,
    ):
        self.timeout_s = timeout_s
        self.trace_dir = trace_dir
        self.artifact = artifact
        self._scratch: Optional[tempfile.TemporaryDirectory] = None

    def __enter__(self) -> "WorkloadRunner":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def close(self) -> None:
        if self._scratch is not None:
            self._scratch.cleanup()
            self._scratch = None

    def _trace_root(self) -> Path:
        if self.trace_dir is not None:
            return Path(self.trace_dir)
        if self._scratch is None:
            self._scratch = tempfile.TemporaryDirectory(prefix="bench-trace-")
        return Path(self._scratch.name)

    def run(self, spec: WorkloadSpec, req: RunRequest, run_index: int = 0) -> RunResult:
        return invoke_workload(
            spec,
            req,
            timeout_s=self.timeout_s,
            trace_dir=self._trace_root() if req.trace_requested else None,
            run_index=run_index,
            artifact=self.artifact,
        )


def select_median_run(runs: Sequence[RunResult]) -> int:
    """
    Index of the median run by wall_time. Even counts take the lower-middle run
    so that a real run is reported; ties go to the earliest index.
    """
    if not runs:
        raise ValueError("select_median_run needs at least one run")
    for index, run in enumerate(runs):
        if not run.ok:
            raise ValueError(f"run {index} did not succeed ({run.exit_class.value})")
    order = sorted(range(len(runs)), key=lambda i: (runs[i].wall_time, i))
    return order[(len(runs) - 1) // 2]


def _mean_metrics(runs: Iterable[RunResult]) -> Dict[str, float]:
    runs = list(runs)
    return {
        field: sum(getattr(run, field) for run in runs) / len(runs)
        for field in METRIC_FIELDS
    }


def _trace_decomposition(run: RunResult) -> Optional[Decomposition]:
    if not run.trace_path or not Path(run.trace_path).exists():
        return None
    try:
        return decompose(parse_trace(run.trace_path), run.wall_time)
    except (TraceParseError, TraceValidationError) as exc:
        logger.warning("Ignoring trace %s: %s", run.trace_path, exc)
        return None


def measure(
    spec: WorkloadSpec,
    config: RunConfig,
    runner: Optional[WorkloadRunner] = None,
) -> MeasurementSet:
    """Run the cell ``config.repeats`` times back to back and reduce the results"""
    if not config.resolved:
        raise ValueError("measure() needs a resolved batch size")
    if not spec.supports(config.mode, config.device):
        raise UnsupportedCellError(f"{spec.name} does not support {config.mode}/{config.device}")

    if runner is None:
        with WorkloadRunner() as owned:
            return measure(spec, config, runner=owned)

    req = config.request()
    allowed_failures = math.ceil(config.repeats / 2)

    runs: List[RunResult] = []
    failures = 0
    for run_index in range(config.repeats):
        result = runner.run(spec, req, run_index)
        runs.append(result)
        if result.exit_class is ExitClass.OOM:
            raise WorkloadOOMError(spec.name, req.batch_size)
        if not result.ok:
            failures += 1
            logger.warning(
                "%s %s/%s run %d failed: %s %s",
                spec.name, config.mode, config.device, run_index, result.exit_class.value, result.detail[:200],
            )
            if failures > allowed_failures:
                raise MeasurementFailure(
                    f"{spec.name} {config.mode}/{config.device}: {failures} of {config.repeats} runs failed"
                )

    ok_indices = [i for i, run in enumerate(runs) if run.ok]
    if failures and len(ok_indices) < MIN_SURVIVING_RUNS:
        raise MeasurementFailure(
            f"{spec.name} {config.mode}/{config.device}: only {len(ok_indices)} runs survived, "
            f"need {MIN_SURVIVING_RUNS}"
        )

    ok_runs = [runs[i] for i in ok_indices]
    selected_index = None
    decomposition = None
    if config.reduction is Reduction.MEDIAN_RUN:
        selected_index = ok_indices[select_median_run(ok_runs)]
        chosen = runs[selected_index]
        aggregate = {field: float(getattr(chosen, field)) for field in METRIC_FIELDS}
        decomposition = _trace_decomposition(chosen)
    else:
        aggregate = _mean_metrics(ok_runs)

    return MeasurementSet(
        workload=spec.name,
        config=config,
        runs=tuple(runs),
        selected_index=selected_index,
        aggregate=aggregate,
        degraded=failures > 0,
        failed_runs=failures,
        decomposition=decomposition,
    )


# ---------------------------------------------------------------------------
# Batch-size search
# ---------------------------------------------------------------------------

class BatchProbe(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int
    exit_class: ExitClass
    wall_time: Optional[int] = None
    score: Optional[float] = None


class BatchSearchResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    workload: str
    device: Device
    batch_size: int
    score_metric: str
    probes: Tuple[BatchProbe, ...]

    @property
    def probed_sizes(self) -> List[int]:
        return [probe.batch_size for probe in self.probes]


def _probe_score(run: RunResult, device: str, batch_size: int) -> Tuple[float, str]:
    if device == "gpu":
        decomposition = _trace_decomposition(run)
        if decomposition is not None:
            return decomposition.active_fraction, "active_fraction"
        logger.warning("No usable trace for gpu probe at bs=%d; falling back to throughput", batch_size)
    return batch_size / run.wall_time, "throughput"


def run_batch_search(
    spec: WorkloadSpec,
    mode: str,
    device: str,
    runner: Optional[WorkloadRunner] = None,
    cap: int = DEFAULT_SEARCH_CAP,
    precision: str = "fp32",
) -> BatchSearchResult:
    """Probe bs = 1, 2, 4, ... (one run each) until the first OOM or ``cap``"""
    if mode != "eval":
        raise ValueError("batch-size search is for eval; training uses default_train_batch_size")
    if not spec.supports(mode, device):
        raise UnsupportedCellError(f"{spec.name} does not support {mode}/{device}")

    if runner is None:
        with WorkloadRunner() as owned:
            return run_batch_search(spec, mode, device, runner=owned, cap=cap, precision=precision)

    probes: List[BatchProbe] = []
    best: Optional[Tuple[float, int]] = None
    metric_used = "active_fraction" if device == "gpu" else "throughput"

    batch_size = 1
    while batch_size <= cap:
        req = RunRequest(
            mode="eval",
            device=device,
            batch_size=batch_size,
            precision=precision,
            trace_requested=device == "gpu",
        )
        result = runner.run(spec, req, 0)

        if result.exit_class is ExitClass.OOM:
            probes.append(BatchProbe(batch_size=batch_size, exit_class=result.exit_class))
            if batch_size == 1:
                raise NoFeasibleBatchError(f"{spec.name} runs out of memory at batch size 1")
            break

        if not result.ok:
            logger.warning("%s probe at bs=%d failed: %s", spec.name, batch_size, result.exit_class.value)
            probes.append(BatchProbe(batch_size=batch_size, exit_class=result.exit_class))
        else:
            score, metric_used = _probe_score(result, device, batch_size)
            probes.append(BatchProbe(
                batch_size=batch_size,
                exit_class=result.exit_class,
                wall_time=result.wall_time,
                score=score,
            ))
            # Ties go to the larger batch size
            if best is None or (score, batch_size) >= best:
                best = (score, batch_size)
        batch_size *= 2

    if best is None:
        raise BatchSearchError(f"No batch-size probe succeeded for {spec.name} on {device}")

    logger.info("%s/%s best eval batch size: %d (%s=%.4f)", spec.name, device, best[1], metric_used, best[0])
    return BatchSearchResult(
        workload=spec.name,
        device=device,
        batch_size=best[1],
        score_metric=metric_used,
        probes=tuple(probes),
    )


def search_batch_size(
    spec: WorkloadSpec,
    mode: str,
    device: str,
    runner: Optional[WorkloadRunner] = None,
    cap: int = DEFAULT_SEARCH_CAP,
) -> int:
    return run_batch_search(spec, mode, device, runner=runner, cap=cap).batch_size


class BatchSizeCache:
    """
    One key-value file per (workload, device): ``<workload>.<device>.bs`` with keys
    WORKLOAD, DEVICE, BATCH_SIZE, SEARCHED_AT.
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def path_for(self, workload: str, device: str) -> Path:
        return self.directory / f"{workload}.{device}.bs"

    def get(self, workload: str, device: str) -> Optional[int]:
        path = self.path_for(workload, device)
        if not path.exists():
            return None
        raw = dotenv_values(path).get("BATCH_SIZE")
        try:
            value = int(raw) if raw else None
        except ValueError:
            logger.warning("Ignoring corrupt batch-size cache entry %s", path)
            return None
        return value if value and value >= 1 else None

    def put(self, workload: str, device: str, batch_size: int) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(workload, device)
        path.touch()
        set_key(str(path), "WORKLOAD", workload, quote_mode="never")
        set_key(str(path), "DEVICE", device, quote_mode="never")
        set_key(str(path), "BATCH_SIZE", str(batch_size), quote_mode="never")
        set_key(str(path), "SEARCHED_AT", datetime.now(timezone.utc).isoformat(), quote_mode="never")
        return path


# ---------------------------------------------------------------------------
# Configuration matrix
# ---------------------------------------------------------------------------

class CellStatus(str, Enum):
    MEASURED = "measured"
    SKIPPED = "skipped"
    FAILED = "failed"


class CellRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Mode
    device: Device
    status: CellStatus
    reason: Optional[str] = None
    batch_size: Optional[int] = None
    measurement: Optional[MeasurementSet] = None

    @model_validator(mode="after")
    def _reason_when_not_measured(self) -> "CellRecord":
        if self.status is not CellStatus.MEASURED and not self.reason:
            raise ValueError("skipped and failed cells need a reason")
        if self.status is CellStatus.MEASURED and self.measurement is None:
            raise ValueError("measured cell needs a measurement")
        return self


class ConfigMatrix(BaseModel):
    model_config = ConfigDict(frozen=True)

    workload: str
    cells: Tuple[CellRecord, ...]

    def measurements(self) -> List[MeasurementSet]:
        return [cell.measurement for cell in self.cells if cell.status is CellStatus.MEASURED]

    def cell(self, mode: str, device: str) -> CellRecord:
        for record in self.cells:
            if record.mode == mode and record.device == device:
                return record
        raise KeyError((mode, device))


def _resolve_eval_batch_size(
    spec: WorkloadSpec,
    device: str,
    base: RunConfig,
    runner: WorkloadRunner,
    bs_cache: Optional[BatchSizeCache],
) -> int:
    if base.resolved:
        return base.batch_size
    if bs_cache is not None:
        cached = bs_cache.get(spec.name, device)
        if cached is not None:
            return cached
    batch_size = search_batch_size(spec, "eval", device, runner=runner)
    if bs_cache is not None:
        bs_cache.put(spec.name, device, batch_size)
    return batch_size


def run_matrix(
    spec: WorkloadSpec,
    base: RunConfig,
    runner: Optional[WorkloadRunner] = None,
    available_devices: Iterable[str] = DEVICES,
    bs_cache: Optional[BatchSizeCache] = None,
) -> ConfigMatrix:
    """Measure train/eval x cpu/gpu serially; every cell yields exactly one record"""
    if runner is None:
        with WorkloadRunner() as owned:
            return run_matrix(spec, base, runner=owned, available_devices=available_devices, bs_cache=bs_cache)

    available = set(available_devices)
    cells: List[CellRecord] = []

    for mode in MODES:
        for device in DEVICES:
            if mode not in spec.supported_modes:
                cells.append(CellRecord(mode=mode, device=device, status=CellStatus.SKIPPED,
                                        reason="mode unsupported"))
                continue
            if device not in spec.supported_devices:
                cells.append(CellRecord(mode=mode, device=device, status=CellStatus.SKIPPED,
                                        reason="device unsupported"))
                continue
            if device not in available:
                cells.append(CellRecord(mode=mode, device=device, status=CellStatus.SKIPPED,
                                        reason="device unavailable"))
                continue

            batch_size = None
            try:
                if mode == "train":
                    batch_size = spec.default_train_batch_size
                else:
                    batch_size = _resolve_eval_batch_size(spec, device, base, runner, bs_cache)
                config = base.model_copy(update={
                    "mode": mode,
                    "device": device,
                    "batch_size": batch_size,
                    "trace": base.trace or device == "gpu",
                })
                measurement = measure(spec, config, runner=runner)
            except (WorkloadOOMError, WorkloadLaunchError, MeasurementFailure, NoFeasibleBatchError,
                    BatchSearchError) as exc:
                logger.warning("%s %s/%s failed: %s", spec.name, mode, device, exc)
                cells.append(CellRecord(mode=mode, device=device, status=CellStatus.FAILED,
                                        reason=str(exc), batch_size=batch_size))
                continue

            cells.append(CellRecord(mode=mode, device=device, status=CellStatus.MEASURED,
                                    batch_size=batch_size, measurement=measurement))

    return ConfigMatrix(workload=spec.name, cells=tuple(cells))

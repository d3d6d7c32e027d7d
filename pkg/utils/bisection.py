"""
Commit Bisection
Binary search over a day's timestamp-ordered commits for the first commit whose build
regresses one (cell, metric) predicate, driven by pluggable build and measure providers.

Providers:
    build(commit_id) -> BuildOutcome (artifact path, or unbuildable with a reason)
    measure(commit_id, artifact, cell) -> {metric field: value}
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
import threading
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Protocol, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import BenchSentryError, ConfigError
from .measurement import RunConfig, WorkloadRunner, measure
from .regression import Metric, RegressionPolicy, is_regression, metric_field, split_cell_id
from .workloads import WorkloadSpec

logger = logging.getLogger(__name__)

SKIP_ALLOWANCE = 4
DEFAULT_BUILD_TIMEOUT_S = 3600.0


class ProbeStatus(str, Enum):
    GOOD = "good"
    BAD = "bad"
    UNBUILDABLE = "unbuildable"
    MEASUREMENT_FAILED = "measurement_failed"


class ProbeOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    status: ProbeStatus
    metrics: Optional[Dict[str, float]] = None
    observed: Optional[float] = None
    reason: Optional[str] = None

    @model_validator(mode="after")
    def _payload_matches_status(self) -> "ProbeOutcome":
        if self.status in (ProbeStatus.GOOD, ProbeStatus.BAD):
            if self.metrics is None:
                raise ValueError("good/bad outcomes carry metrics")
        elif not self.reason:
            raise ValueError("unbuildable/measurement_failed outcomes carry a reason")
        return self

    @property
    def decisive(self) -> bool:
        return self.status in (ProbeStatus.GOOD, ProbeStatus.BAD)


class BuildOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    artifact: Optional[str] = None
    reason: Optional[str] = None

    @property
    def buildable(self) -> bool:
        return self.artifact is not None


class BuildProvider(Protocol):
    def build(self, commit: str) -> BuildOutcome: ...


class MeasureProvider(Protocol):
    def measure(self, commit: str, artifact: str, cell: str) -> Dict[str, float]: ...


class ProbeRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    commit: str
    index: int
    outcome: ProbeOutcome


class BisectionSession(BaseModel):
    """Commit range and predicate going in; probe log and verdict coming out"""

    model_config = ConfigDict(frozen=True)

    commits: Tuple[str, ...] = Field(min_length=1)
    cell: str
    metric: Metric = Metric.WALL_TIME
    baseline_value: float
    good_commit: Optional[str] = None
    probe_log: Tuple[ProbeRecord, ...] = ()
    culprit: Optional[str] = None
    inconclusive_reason: Optional[str] = None

    @property
    def finished(self) -> bool:
        return self.culprit is not None or self.inconclusive_reason is not None

    @property
    def probe_count(self) -> int:
        return len(self.probe_log)

    def probe_budget(self, unbuildable_encountered: int = 0) -> int:
        """ceil(log2 n) search probes + 2 boundary probes + one per skipped commit"""
        return math.ceil(math.log2(len(self.commits))) + 2 + unbuildable_encountered

    def unbuildable_probes(self) -> int:
        return sum(1 for record in self.probe_log if not record.outcome.decisive)


class ProbeCache:
    """Per-commit probe results; each update is atomic"""

    def __init__(self):
        self._lock = threading.Lock()
        self._outcomes: Dict[Tuple[str, str, str], ProbeOutcome] = {}

    def get(self, commit: str, cell: str, metric: Metric) -> Optional[ProbeOutcome]:
        with self._lock:
            return self._outcomes.get((commit, cell, metric.value))

    def put(self, commit: str, cell: str, metric: Metric, outcome: ProbeOutcome) -> None:
        with self._lock:
            self._outcomes[(commit, cell, metric.value)] = outcome

    def __len__(self) -> int:
        with self._lock:
            return len(self._outcomes)


def probe_commit(
    commit: str,
    build_provider: BuildProvider,
    measure_provider: MeasureProvider,
    cell: str,
    policy: RegressionPolicy,
    baseline_value: float,
    metric: Metric = Metric.WALL_TIME,
    cache: Optional[ProbeCache] = None,
) -> ProbeOutcome:
    """Build ``commit``, measure ``cell`` and judge it against ``baseline_value``"""
    if cache is not None:
        cached = cache.get(commit, cell, metric)
        if cached is not None:
            return cached

    try:
        build = build_provider.build(commit)
    except Exception as exc:
        logger.warning("Build of %s raised: %s", commit, exc)
        build = BuildOutcome(reason=f"build raised {type(exc).__name__}: {exc}")

    if not build.buildable:
        outcome = ProbeOutcome(status=ProbeStatus.UNBUILDABLE, reason=build.reason or "unbuildable")
    else:
        try:
            metrics = dict(measure_provider.measure(commit, build.artifact, cell))
            observed = float(metrics[metric_field(metric)])
        except Exception as exc:
            logger.warning("Measuring %s at %s failed: %s", cell, commit, exc)
            # Not cached, so a retry measures again
            return ProbeOutcome(
                status=ProbeStatus.MEASUREMENT_FAILED,
                reason=f"{type(exc).__name__}: {exc}",
            )
        bad = is_regression(metric, baseline_value, observed, policy)
        outcome = ProbeOutcome(
            status=ProbeStatus.BAD if bad else ProbeStatus.GOOD,
            metrics=metrics,
            observed=observed,
        )

    if cache is not None:
        cache.put(commit, cell, metric, outcome)
    return outcome


def _nearest_candidates(mid: int, lo: int, hi: int):
    """mid, mid+1, mid-1, mid+2, mid-2, ... restricted to [lo, hi]"""
    yield mid
    for offset in range(1, hi - lo + 1):
        for candidate in (mid + offset, mid - offset):
            if lo <= candidate <= hi:
                yield candidate


def bisect(
    session: BisectionSession,
    build_provider: BuildProvider,
    measure_provider: MeasureProvider,
    policy: Optional[RegressionPolicy] = None,
    cache: Optional[ProbeCache] = None,
) -> BisectionSession:
    """
    First-bad-commit search assuming one step change (good ... good bad ... bad).
    The last commit must reproduce the regression; the good commit, when given, is
    re-verified once.
    """
    policy = policy or RegressionPolicy()
    if cache is None:
        cache = ProbeCache()
    commits = session.commits
    log: List[ProbeRecord] = []

    def probe(commit: str, index: int) -> ProbeOutcome:
        outcome = probe_commit(
            commit, build_provider, measure_provider, session.cell, policy,
            session.baseline_value, session.metric, cache,
        )
        log.append(ProbeRecord(commit=commit, index=index, outcome=outcome))
        if outcome.status is ProbeStatus.MEASUREMENT_FAILED:
            outcome = probe_commit(
                commit, build_provider, measure_provider, session.cell, policy,
                session.baseline_value, session.metric, cache,
            )
            log.append(ProbeRecord(commit=commit, index=index, outcome=outcome))
        logger.info("Probe %s [%d] -> %s", commit, index, outcome.status.value)
        return outcome

    def finish(culprit: Optional[str] = None, reason: Optional[str] = None) -> BisectionSession:
        if culprit:
            logger.info("Culprit for %s %s: %s after %d probes", session.cell, session.metric.value,
                        culprit, len(log))
        else:
            logger.warning("Bisection of %s inconclusive: %s", session.cell, reason)
        return session.model_copy(update={
            "probe_log": tuple(log),
            "culprit": culprit,
            "inconclusive_reason": reason,
        })

    last = len(commits) - 1
    tail = probe(commits[last], last)
    if tail.status is ProbeStatus.GOOD:
        return finish(reason="regression not reproduced")
    if not tail.decisive:
        return finish(reason=f"last commit could not be probed: {tail.reason}")

    if session.good_commit is not None:
        head = probe(session.good_commit, -1)
        if head.status is ProbeStatus.BAD:
            return finish(reason="regression already present at the good commit")
        if not head.decisive:
            logger.warning("Good commit %s could not be probed; assuming good", session.good_commit)

    lo, hi = 0, last
    skipped: set = set()
    while lo < hi:
        mid = (lo + hi) // 2
        target = next(
            (j for j in _nearest_candidates(mid, lo, hi - 1) if j not in skipped),
            None,
        )
        if target is None:
            return finish(reason="unbuildable range")
        outcome = probe(commits[target], target)
        if not outcome.decisive:
            skipped.add(target)
            if len(skipped) > SKIP_ALLOWANCE:
                return finish(reason=f"more than {SKIP_ALLOWANCE} unbuildable commits in range")
            continue
        if outcome.status is ProbeStatus.BAD:
            hi = target
        else:
            lo = target + 1

    return finish(culprit=commits[hi])


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class CommandBuildProvider:
    """
    Shells out to a command template with ``{commit}`` substituted. Exit code 0 means
    the build succeeded; the last non-empty stdout line is the artifact path.
    """

    def __init__(self, template: str, timeout_s: float = DEFAULT_BUILD_TIMEOUT_S):
        if "{commit}" not in template:
            raise ConfigError("build command template must contain {commit}")
        self.template = template
        self.timeout_s = timeout_s
        self._artifacts: Dict[str, BuildOutcome] = {}
        self._lock = threading.Lock()

    def build(self, commit: str) -> BuildOutcome:
        with self._lock:
            if commit in self._artifacts:
                return self._artifacts[commit]

        argv = shlex.split(self.template.format(commit=commit))
        try:
            completed = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s)
        except subprocess.TimeoutExpired:
            outcome = BuildOutcome(reason=f"build timed out after {self.timeout_s} s")
        except OSError as exc:
            outcome = BuildOutcome(reason=f"could not run build command: {exc}")
        else:
            lines = [line.strip() for line in (completed.stdout or "").splitlines() if line.strip()]
            if completed.returncode != 0:
                outcome = BuildOutcome(reason=f"build exited {completed.returncode}: {completed.stderr[-300:]}")
            elif not lines:
                outcome = BuildOutcome(reason="build printed no artifact path")
            else:
                outcome = BuildOutcome(artifact=lines[-1])

        with self._lock:
            self._artifacts[commit] = outcome
        return outcome


class WorkloadMeasureProvider:
    """Measures a cell by running the registered workload against a build artifact"""

    def __init__(
        self,
        registry: Mapping[str, WorkloadSpec],
        base_config: RunConfig,
        batch_sizes: Optional[Mapping[str, int]] = None,
        timeout_s: float = 600.0,
    ):
        self.registry = registry
        self.base_config = base_config
        self.batch_sizes = dict(batch_sizes or {})
        self.timeout_s = timeout_s

    def measure(self, commit: str, artifact: str, cell: str) -> Dict[str, float]:
        workload, mode, device = split_cell_id(cell)
        spec = self.registry[workload]
        batch_size = self.batch_sizes.get(cell)
        if batch_size is None:
            batch_size = spec.default_train_batch_size
        config = self.base_config.model_copy(update={
            "mode": mode, "device": device, "batch_size": batch_size, "trace": False,
        })
        with WorkloadRunner(timeout_s=self.timeout_s, artifact=Path(artifact)) as runner:
            return dict(measure(spec, config, runner=runner).aggregate)


class SimulatedBuildError(BenchSentryError):
    pass


class SimulatedHistory(BaseModel):
    """
    Seeded commit history with an injected step regression.

    JSON file keys: n, culprit (index or null), step, noise, unbuildable, seed, metric,
    optional commits and measurement_failures.
    """

    model_config = ConfigDict(frozen=True)

    n: int = Field(ge=1)
    culprit: Optional[int] = None
    step: float = Field(default=0.2, gt=-1.0)
    noise: float = Field(default=0.0, ge=0.0, lt=1.0)
    unbuildable: FrozenSet[int] = frozenset()
    measurement_failures: FrozenSet[int] = frozenset()
    seed: int = 0
    metric: Metric = Metric.WALL_TIME
    commits: Optional[Tuple[str, ...]] = None
    baseline_metrics: Dict[str, float] = Field(default_factory=lambda: {
        "wall_time": 100000.0,
        "peak_cpu_mem": 512.0 * 1024 * 1024,
        "peak_gpu_mem": 1024.0 * 1024 * 1024,
        "post_run_resident_mem": 64.0 * 1024 * 1024,
    })
    artifact_dir: Optional[str] = None

    @model_validator(mode="after")
    def _indices_in_range(self) -> "SimulatedHistory":
        if self.culprit is not None and not 0 <= self.culprit < self.n:
            raise ValueError(f"culprit {self.culprit} outside [0, {self.n})")
        if self.commits is not None and len(self.commits) != self.n:
            raise ValueError("commits list length must equal n")
        return self

    def commit_ids(self) -> Tuple[str, ...]:
        if self.commits is not None:
            return self.commits
        return tuple(f"sim{index:04d}" for index in range(self.n))

    def index_of(self, commit: str) -> int:
        ids = self.commit_ids()
        if commit in ids:
            return ids.index(commit)
        # Anything outside the day's range is the previous nightly
        return -1

    def regressed(self, index: int) -> bool:
        return self.culprit is not None and index >= self.culprit

    def scale(self, index: int) -> float:
        return 1.0 + self.step if self.regressed(index) else 1.0

    def first_bad(self) -> Optional[str]:
        for index, commit in enumerate(self.commit_ids()):
            if self.regressed(index):
                return commit
        return None

    def artifact_scales(self, index: int) -> Dict[str, float]:
        scale = self.scale(index)
        scales = {"wall_time_scale": 1.0, "mem_scale": 1.0, "leak_bytes": 0}
        if self.metric is Metric.WALL_TIME:
            scales["wall_time_scale"] = scale
        elif self.metric is Metric.LEAK:
            scales["leak_bytes"] = int(max(0.0, scale - 1.0) * 64 * 1024 * 1024)
        else:
            scales["mem_scale"] = scale
        return scales

    def build(self, commit: str) -> BuildOutcome:
        index = self.index_of(commit)
        if index in self.unbuildable:
            raise SimulatedBuildError(f"simulated build failure at {commit}")
        if self.artifact_dir is None:
            return BuildOutcome(artifact=f"sim://{commit}")
        path = Path(self.artifact_dir) / f"{commit}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.artifact_scales(index)))
        return BuildOutcome(artifact=str(path))

    def measure(self, commit: str, artifact: str, cell: str) -> Dict[str, float]:
        index = self.index_of(commit)
        if index in self.measurement_failures:
            raise RuntimeError(f"simulated measurement failure at {commit}")
        rng = np.random.default_rng([self.seed, index + 1])
        metrics = dict(self.baseline_metrics)
        field = metric_field(self.metric)
        jitter = 1.0 + self.noise * float(rng.uniform(-1.0, 1.0))
        if self.metric is Metric.LEAK:
            metrics[field] += self.artifact_scales(index)["leak_bytes"]
        else:
            metrics[field] *= self.scale(index) * jitter
        return metrics


def load_history(path: Union[str, Path], artifact_dir: Optional[Union[str, Path]] = None) -> SimulatedHistory:
    data = json.loads(Path(path).read_text())
    if artifact_dir is not None:
        data["artifact_dir"] = str(artifact_dir)
    return SimulatedHistory.model_validate(data)


def load_commits(path: Union[str, Path]) -> List[str]:
    """
    Read ``<commit_id> <ISO-8601 timestamp>`` lines and return ids ordered by timestamp.
    Lines without a timestamp keep file order after all timestamped ones.
    """
    entries: List[Tuple[Optional[datetime], int, str]] = []
    for position, raw in enumerate(Path(path).read_text().splitlines()):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        stamp = None
        if len(parts) == 2:
            try:
                stamp = datetime.fromisoformat(parts[1].strip().replace("Z", "+00:00"))
            except ValueError as exc:
                raise ConfigError(f"{path}: bad timestamp on line {position + 1}: {parts[1]!r}") from exc
            if stamp.tzinfo is None:
                stamp = stamp.replace(tzinfo=timezone.utc)
        entries.append((stamp, position, parts[0]))

    timestamped = sorted((e for e in entries if e[0] is not None), key=lambda e: (e[0], e[1]))
    untimed = [e for e in entries if e[0] is None]
    return [commit for _, _, commit in timestamped + untimed]

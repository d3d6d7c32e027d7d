import json
import sys
from pathlib import Path

import pytest
import requests

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.append(str(PROJECT_ROOT))

import bench_sentry  # noqa: E402
from utils import notifications  # noqa: E402
from utils.regression import BaselineStore  # noqa: E402


@pytest.fixture()
def workspace(tmp_path, monkeypatch):
    """Isolated cwd with a small registry; returns a helper building common flags"""
    monkeypatch.chdir(tmp_path)
    for key in ("BENCH_SENTRY_WEBHOOK_URL", "BENCH_SENTRY_REGISTRY", "BENCH_SENTRY_BASELINE"):
        monkeypatch.delenv(key, raising=False)

    registry = tmp_path / "registry"
    registry.mkdir()
    (registry / "synth-const.workload").write_text("BUILTIN=synth-const\nDEVICES=cpu\n")
    (registry / "synth-matmul.workload").write_text("BUILTIN=synth-matmul\n")
    (registry / "synth-oom.workload").write_text("BUILTIN=synth-oom\n")

    def flags(out="out"):
        return [
            "--registry", str(registry),
            "--baseline", str(tmp_path / "store"),
            "--out", str(tmp_path / out),
            "--repeats", "3",
        ]

    flags.root = tmp_path
    return flags


def _history(path: Path, **fields) -> str:
    data = {"n": 10, "culprit": None, "step": 0.2, "seed": 1}
    data.update(fields)
    path.write_text(json.dumps(data))
    return str(path)


def _nightly(workspace, history, *extra, out="out"):
    return bench_sentry.main([
        "ci-nightly", *workspace(out),
        "--workload", "synth-const", "--devices", "cpu", "--bs", "2",
        "--history", history, *extra,
    ])


@pytest.fixture()
def no_webhook(monkeypatch):
    def fail(*args, **kwargs):
        raise AssertionError("webhook must not be called")

    monkeypatch.setattr(notifications.requests, "post", fail)


def test_clean_nightly_exits_zero_and_advances_baseline(workspace, no_webhook):
    clean = _history(workspace.root / "clean.json")

    assert _nightly(workspace, clean, "--commit", "nightly-0", "--webhook-url", "https://hooks.example/x") == 0
    assert _nightly(workspace, clean, "--webhook-url", "https://hooks.example/x", out="out2") == 0

    store = BaselineStore(workspace.root / "store")
    baseline = store.load()
    assert baseline.commit == "sim0009"
    assert set(baseline.cells) == {"synth-const/train/cpu", "synth-const/eval/cpu"}
    assert {cell.commit for cell in baseline.cells.values()} == {"sim0009"}
    assert [b.commit for b in store.history()] == ["nightly-0", "sim0009"]
    assert (workspace.root / "out2" / "nightly.md").exists()


def test_injected_regression_exits_three_and_names_culprit(workspace, monkeypatch):
    clean = _history(workspace.root / "clean.json")
    regressed = _history(workspace.root / "regressed.json", culprit=5)
    posted = []

    class Response:
        status_code = 201
        text = ""

    def fake_post(url, json=None, headers=None, timeout=None):
        posted.append(json)
        return Response()

    monkeypatch.setattr(notifications.requests, "post", fake_post)

    assert _nightly(workspace, clean, "--commit", "nightly-0") == 0
    assert _nightly(workspace, regressed, "--webhook-url", "https://hooks.example/x", out="out2") == 3

    assert len(posted) == 1
    assert posted[0]["culprit"] == "sim0005"
    assert "sim0005" in posted[0]["body"]

    report = json.loads((workspace.root / "out2" / "nightly.json").read_text())
    assert report["schema_version"] == 1
    assert {f["culprit"] for f in report["findings"]} == {"sim0005"}
    assert {f["metric"] for f in report["findings"]} == {"wall_time"}
    assert all(b["culprit"] == "sim0005" for b in report["bisections"])

    # Flagged cells keep the old reference
    baseline = BaselineStore(workspace.root / "store").load()
    assert baseline.commit == "sim0009"
    assert baseline.cells["synth-const/eval/cpu"].commit == "nightly-0"
    assert baseline.cells["synth-const/eval/cpu"].wall_time == 7000


def test_unreachable_webhook_exits_four_with_reports_on_disk(workspace, monkeypatch):
    clean = _history(workspace.root / "clean.json")
    regressed = _history(workspace.root / "regressed.json", culprit=3)

    def refuse(*args, **kwargs):
        raise requests.ConnectionError("connection refused")

    monkeypatch.setattr(notifications.requests, "post", refuse)

    assert _nightly(workspace, clean, "--commit", "nightly-0") == 0
    assert _nightly(workspace, regressed, "--webhook-url", "http://127.0.0.1:9/hook", out="out2") == 4

    assert (workspace.root / "out2" / "nightly.json").exists()
    assert "sim0003" in (workspace.root / "out2" / "nightly.md").read_text()


def test_findings_without_webhook_still_exit_three(workspace, no_webhook):
    clean = _history(workspace.root / "clean.json")
    regressed = _history(workspace.root / "regressed.json", culprit=7)

    assert _nightly(workspace, clean, "--commit", "nightly-0") == 0
    assert _nightly(workspace, regressed, out="out2") == 3


def test_missing_baseline_parent_fails_before_measuring(workspace):
    clean = _history(workspace.root / "clean.json")

    code = bench_sentry.main([
        "ci-nightly", *workspace(), "--baseline", str(workspace.root / "nope" / "store"),
        "--workload", "synth-const", "--devices", "cpu", "--history", clean,
    ])

    assert code == 2
    assert not (workspace.root / "out" / "artifacts").exists()


def test_unbuildable_nightly_is_a_measurement_failure(workspace, no_webhook):
    broken = _history(workspace.root / "broken.json", unbuildable=[9])

    assert _nightly(workspace, broken) == 5
    assert BaselineStore(workspace.root / "store").load() is None


def test_run_single_cell_writes_raw_runs(workspace, capsys):
    code = bench_sentry.main([
        "run", *workspace(), "--workload", "synth-const", "--mode", "eval", "--device", "cpu", "--bs", "2", "--json",
    ])

    assert code == 0
    out_dir = workspace.root / "out"
    record = json.loads((out_dir / "measurement.json").read_text())
    assert record["aggregate"]["wall_time"] == 7000
    assert len((out_dir / "runs.jsonl").read_text().splitlines()) == 3
    assert (out_dir / "runs.csv").exists()
    assert '"wall_time": 7000' in capsys.readouterr().out


def test_run_mean_reduction_defaults_to_twenty_repeats(workspace, monkeypatch):
    monkeypatch.delenv("BENCH_SENTRY_REPEATS", raising=False)
    flags = workspace()
    flags = flags[:flags.index("--repeats")]

    code = bench_sentry.main(["run", *flags, "--workload", "synth-const", "--device", "cpu", "--bs", "2",
                              "--reduction", "arithmetic_mean"])

    assert code == 0
    record = json.loads((workspace.root / "out" / "measurement.json").read_text())
    assert record["config"]["repeats"] == 20
    assert record["selected_index"] is None
    assert record["aggregate"]["wall_time"] == 7000


def test_run_mean_reduction_keeps_explicit_repeats(workspace):
    code = bench_sentry.main(["run", *workspace(), "--workload", "synth-const", "--device", "cpu", "--bs", "2",
                              "--reduction", "arithmetic_mean"])

    assert code == 0
    assert len((workspace.root / "out" / "runs.jsonl").read_text().splitlines()) == 3


def test_run_unknown_workload_is_a_config_error(workspace):
    assert bench_sentry.main(["run", *workspace(), "--workload", "nope"]) == 2


def test_run_rejects_bad_batch_size(workspace):
    assert bench_sentry.main(["run", *workspace(), "--workload", "synth-const", "--bs", "0"]) == 2


def test_run_out_of_memory_is_a_measurement_failure(workspace):
    assert bench_sentry.main(["run", *workspace(), "--workload", "synth-oom", "--bs", "1"]) == 5
    assert bench_sentry.main(["run", *workspace(), "--workload", "synth-oom"]) == 5


def test_matrix_gives_four_cells_per_workload(workspace):
    code = bench_sentry.main(["matrix", *workspace(), "--workload", "synth-const", "--workload", "synth-matmul",
                              "--bs", "4"])

    assert code == 0
    matrices = json.loads((workspace.root / "out" / "matrix.json").read_text())["matrices"]
    assert [len(m["cells"]) for m in matrices] == [4, 4]
    const = {(c["mode"], c["device"]): c for c in matrices[0]["cells"]}
    assert const[("train", "gpu")]["status"] == "skipped"
    assert const[("train", "gpu")]["reason"] == "device unsupported"
    assert all(c["status"] == "measured" for c in matrices[1]["cells"])


def test_report_builds_breakdown_from_saved_measurements(workspace):
    assert bench_sentry.main(["matrix", *workspace(), "--workload", "synth-matmul", "--bs", "4"]) == 0

    code = bench_sentry.main(["report", *workspace("report"), str(workspace.root / "out")])

    assert code == 0
    breakdown = json.loads((workspace.root / "report" / "breakdown.json").read_text())
    assert {row["domain"] for row in breakdown["rows"]} == {"recommendation"}
    assert {row["mode"] for row in breakdown["rows"]} == {"train", "eval"}
    assert "GPU Activeness (%)" in (workspace.root / "report" / "breakdown.md").read_text()
    assert (workspace.root / "report" / "breakdown.csv").exists()


def test_compare_two_result_directories(workspace):
    assert bench_sentry.main(["run", *workspace("a"), "--workload", "synth-matmul", "--bs", "4"]) == 0
    assert bench_sentry.main(["run", *workspace("b"), "--workload", "synth-matmul", "--bs", "4"]) == 0

    code = bench_sentry.main(["compare", *workspace("cmp"), str(workspace.root / "a"), str(workspace.root / "b"),
                              "--labels", "eager", "compiled", "--speedup"])

    assert code == 0
    record = json.loads((workspace.root / "cmp" / "comparison.json").read_text())
    assert record["geomeans"]["wall_time"] == pytest.approx(1.0)
    assert record["speedups"]["synth-matmul/eval/cpu"] == pytest.approx(1.0)


def test_detect_against_empty_store_reports_new_cells(workspace):
    assert bench_sentry.main(["run", *workspace(), "--workload", "synth-const", "--bs", "2"]) == 0

    code = bench_sentry.main(["detect", *workspace("detect"), str(workspace.root / "out"), "--accept", "c1"])

    assert code == 0
    assert BaselineStore(workspace.root / "store").load().commit == "c1"


def test_decompose_trace_file(workspace, capsys):
    trace = workspace.root / "trace.json"
    trace.write_text(json.dumps([
        {"ph": "X", "cat": "kernel", "ts": 0, "dur": 30000},
        {"ph": "X", "cat": "kernel", "ts": 20000, "dur": 30000},
        {"ph": "X", "cat": "gpu_memcpy", "name": "Memcpy HtoD", "ts": 40000, "dur": 30000},
    ]))

    code = bench_sentry.main(["decompose", *workspace(), str(trace), "--wall-time", "100000", "--json"])

    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert (summary["active_pct"], summary["movement_pct"], summary["idle_pct"]) == (50.0, 20.0, 30.0)


def test_decompose_bad_trace_is_a_validation_error(workspace):
    trace = workspace.root / "trace.json"
    trace.write_text(json.dumps([{"ph": "X", "cat": "kernel", "ts": 0, "dur": -5}]))

    assert bench_sentry.main(["decompose", *workspace(), str(trace), "--wall-time", "100"]) == 2


def test_bisect_simulated_history(workspace):
    history = _history(workspace.root / "h.json", n=70, culprit=42)

    code = bench_sentry.main(["bisect", *workspace(), "--cell", "synth-conv/train/cpu", "--history", history])

    assert code == 0
    result = json.loads((workspace.root / "out" / "bisection.json").read_text())
    assert result["culprit"] == "sim0042"
    assert len(result["probe_log"]) <= 9


def test_bisect_needs_a_commit_source(workspace):
    assert bench_sentry.main(["bisect", *workspace(), "--cell", "synth-conv/train/cpu"]) == 2


def test_simulated_days_with_prefixes_bisect_without_commit_override(workspace, no_webhook):
    sys.path.insert(0, str(PROJECT_ROOT / "scripts"))
    try:
        import make_history
    finally:
        sys.path.remove(str(PROJECT_ROOT / "scripts"))

    assert make_history.main(["--n", "10", "--prefix", "day1-", "--out", str(workspace.root / "d1")]) == 0
    assert make_history.main(["--n", "10", "--culprit", "6", "--prefix", "day2-",
                              "--out", str(workspace.root / "d2")]) == 0

    assert _nightly(workspace, str(workspace.root / "d1" / "history.json")) == 0
    assert BaselineStore(workspace.root / "store").load().commit == "day1-0009"

    assert _nightly(workspace, str(workspace.root / "d2" / "history.json"), out="out2") == 3
    report = json.loads((workspace.root / "out2" / "nightly.json").read_text())
    assert {f["culprit"] for f in report["findings"]} == {"day2-0006"}
    assert "day2-0000" in (workspace.root / "d2" / "commits.txt").read_text()

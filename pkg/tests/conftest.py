import sys
from pathlib import Path

import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.append(str(PROJECT_ROOT))


@pytest.fixture(autouse=True)
def fast_synthetic_workloads(monkeypatch):
    """Built-in workloads report their modelled time without sleeping through it"""
    monkeypatch.setenv("BENCH_SYNTH_SLEEP", "0")
    for key in ("BENCH_ARTIFACT", "BENCH_RUN_INDEX"):
        monkeypatch.delenv(key, raising=False)


@pytest.fixture()
def fake_workload(tmp_path):
    """Write a throwaway workload script and return a WorkloadSpec that runs it"""
    from utils.workloads import WorkloadSpec

    def _make(body: str, name: str = "fake", **overrides) -> WorkloadSpec:
        script = tmp_path / f"{name}.py"
        script.write_text(body)
        fields = dict(
            name=name,
            supported_modes={"train", "eval"},
            supported_devices={"cpu", "gpu"},
            default_train_batch_size=4,
            executable=(sys.executable, str(script)),
        )
        fields.update(overrides)
        return WorkloadSpec(**fields)

    return _make

import importlib.util
import json
from pathlib import Path

import pytest

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


@pytest.fixture(scope="module")
def bench():
    spec = importlib.util.spec_from_file_location("bench_kernels", BENCH)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_smoke_writes_json(bench, tmp_path, capsys):
    out = bench.main(["--repeat", "1", "--skip-step", "--json", str(tmp_path / "b.json")])
    doc = json.loads((tmp_path / "b.json").read_text())
    assert doc["backend"] == out["backend"]
    assert {r["case"] for r in doc["kernels"]} == {r["case"] for r in out["kernels"]}
    assert all(r["python_ms"] > 0 for r in doc["kernels"])
    assert "speedup" in capsys.readouterr().out

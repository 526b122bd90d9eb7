import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import json

import numpy as np
import pytest

from src.benchmark import bench_mmlc, fit_loglog, write_bench_json
from src.errors import ContractError
from src.mmlc import baseline_mac_count, mac_count


@pytest.fixture(scope="module")
def report():
    return bench_mmlc([128, 256, 512, 1024], n=8, d=4, heads=4, trials=1, seed=0)


def test_connector_scales_linearly(report):
    assert report["slope"] == pytest.approx(1.0, abs=0.05)
    assert report["r2"] > 0.99


def test_full_attention_scales_quadratically(report):
    assert report["baseline_slope"] == pytest.approx(2.0, abs=0.05)


def test_counted_macs_match_formulas(report):
    for point in report["points"]:
        assert point["formula_match"]
        assert point["macs"] == mac_count(point["M"], 8, 4, 4)
        assert point["baseline_macs"] == baseline_mac_count(point["M"], 4, 4)
        assert point["ns"] > 0 and point["baseline_ns"] > 0


def test_fit_loglog_exact_power_law():
    ms = [10, 20, 40, 80]
    fit = fit_loglog(ms, [3.0 * m ** 1.5 for m in ms])
    assert fit["slope"] == pytest.approx(1.5)
    assert fit["r2"] == pytest.approx(1.0)
    np.testing.assert_allclose(fit["residuals"], 0.0, atol=1e-9)


def test_bench_rejects_bad_lengths():
    with pytest.raises(ContractError):
        bench_mmlc([128, 1024])
    with pytest.raises(ContractError):
        bench_mmlc([128, 256, 512])
    with pytest.raises(ContractError):
        bench_mmlc([8, 32, 64], n=8)


def test_write_bench_json(tmp_path, report):
    path = write_bench_json(report, tmp_path / "out" / "bench.json")
    loaded = json.loads(path.read_text())
    assert [p["M"] for p in loaded["points"]] == [128, 256, 512, 1024]
    assert loaded["N"] == 8 and loaded["D"] == 4

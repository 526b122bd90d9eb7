import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import math

import numpy as np
import pytest

from src.errors import ShapeError
from src.metrics import (
    MetricReport, binary_f1, bicubic_upsample, edge_f1, evaluate, extract_edges, mean_reports, psnr, ssim,
)
from src.synth_data import make_sample


def test_psnr_identical_and_known_value():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_bounds(rng):
    a = rng.random((32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    noisy = np.clip(a + rng.normal(0.0, 0.2, a.shape), 0.0, 1.0)
    assert -1.0 <= ssim(a, noisy) < 1.0
    with pytest.raises(ShapeError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_extract_edges_on_constant_image_is_empty():
    assert not extract_edges(np.full((16, 16, 3), 0.3)).any()


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5, 6, 7])
def test_edge_f1_of_ground_truth_image_is_one(seed):
    sample = make_sample(seed)
    assert edge_f1(sample.hr, sample.modalities["edge"].grid) == pytest.approx(1.0)


def test_binary_f1_conventions():
    empty = np.zeros((6, 6), dtype=bool)
    line = empty.copy()
    line[2, :] = True
    shifted = empty.copy()
    shifted[3, :] = True
    assert binary_f1(empty, empty) == 1.0
    assert binary_f1(line, empty) == 0.0
    assert binary_f1(empty, line) == 0.0
    assert binary_f1(shifted, line, radius=1) == 1.0
    assert binary_f1(shifted, line, radius=0) == 0.0


def test_evaluate_and_mean_reports():
    sample = make_sample(2)
    report = evaluate(sample.hr, sample.hr, sample.modalities["edge"].grid)
    assert report.psnr == math.inf
    assert report.ssim == pytest.approx(1.0)
    mean = mean_reports([MetricReport(20.0, 0.5, 0.2), MetricReport(30.0, 0.7, 0.4)])
    assert mean.as_row() == pytest.approx({"psnr": 25.0, "ssim": 0.6, "edge_f1": 0.3})
    assert mean.notes["count"] == "2"


def test_bicubic_upsample_constant_and_shape():
    lr = np.full((8, 8, 3), 0.25, dtype=np.float32)
    up = bicubic_upsample(lr, 4)
    assert up.shape == (32, 32, 3)
    np.testing.assert_allclose(up, 0.25, atol=1e-5)


def _naive_ssim(a, b, window=8, stride=4):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    scores = []
    for c in range(a.shape[2]):
        for i in range(0, a.shape[0] - window + 1, stride):
            for j in range(0, a.shape[1] - window + 1, stride):
                x = a[i:i + window, j:j + window, c].ravel()
                y = b[i:i + window, j:j + window, c].ravel()
                mx, my = x.sum() / x.size, y.sum() / y.size
                vx = sum((v - mx) ** 2 for v in x) / x.size
                vy = sum((v - my) ** 2 for v in y) / y.size
                cov = sum((u - mx) * (v - my) for u, v in zip(x, y)) / x.size
                scores.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return sum(scores) / len(scores)


def test_metrics_match_naive_reference(rng):
    a = rng.random((16, 20, 3))
    b = rng.random((16, 20, 3))
    mse = sum(float(v) ** 2 for v in (a - b).ravel()) / a.size
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)
    assert ssim(a, b) == pytest.approx(_naive_ssim(a, b), abs=1e-9)

"""Reference-based image metrics: PSNR, SSIM and edge-consistency F1."""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy.ndimage import binary_dilation
from skimage.filters import threshold_otsu

from src.errors import ShapeError

logger = logging.getLogger(__name__)

PSNR_IDENTICAL = math.inf
SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
EDGE_CLIP = 0.25
EDGE_RADIUS = 1


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    edge_f1: float
    notes: Dict[str, str] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        row = asdict(self)
        row.pop("notes")
        return row


def _check_pair(kind: str, a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes differ {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / mse) on unit-range images; identical inputs give `PSNR_IDENTICAL`."""
    a, b = _check_pair("psnr", a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / err)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Mean structural similarity over 8x8 windows at stride 4.

    Statistics are population (biased) moments per window and channel; the
    score is the plain average over all windows and channels.

    Args:
        a: H x W or H x W x C image in [0, 1].
        b: Same shape as `a`.

    Returns:
        Score in [-1, 1].
    """
    a, b = _check_pair("ssim", a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")

    window = (SSIM_WINDOW, SSIM_WINDOW)
    wa = sliding_window_view(a, window, axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    wb = sliding_window_view(b, window, axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b

    score = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    return float(score.mean())


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Largest channel-L2 difference to any 4-neighbor, clipped at EDGE_CLIP."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    magnitude = np.zeros(image.shape[:2])
    vertical = np.sqrt(((image[1:] - image[:-1]) ** 2).sum(axis=-1))
    horizontal = np.sqrt(((image[:, 1:] - image[:, :-1]) ** 2).sum(axis=-1))
    magnitude[1:] = np.maximum(magnitude[1:], vertical)
    magnitude[:-1] = np.maximum(magnitude[:-1], vertical)
    magnitude[:, 1:] = np.maximum(magnitude[:, 1:], horizontal)
    magnitude[:, :-1] = np.maximum(magnitude[:, :-1], horizontal)
    return np.minimum(magnitude, EDGE_CLIP)


def extract_edges(image: np.ndarray) -> np.ndarray:
    """
    Binary edge map: gradient magnitude above its Otsu threshold.

    The magnitude is quantized to 8 bits first so every histogram bin holds a
    single level and the threshold cleanly separates the two classes.
    """
    levels = np.round(gradient_magnitude(image) / EDGE_CLIP * 255.0).astype(np.uint8)
    if levels.min() == levels.max():
        return np.zeros(levels.shape, dtype=bool)
    return levels > threshold_otsu(levels)


def binary_f1(pred: np.ndarray, gt: np.ndarray, radius: int = EDGE_RADIUS) -> float:
    """F1 between binary maps where a pixel matches anything within `radius` (Chebyshev)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"binary_f1: shapes differ {pred.shape} vs {gt.shape}")
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    precision = (pred & binary_dilation(gt, structure)).sum() / pred.sum()
    recall = (gt & binary_dilation(pred, structure)).sum() / gt.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def edge_f1(sr: np.ndarray, gt_edges: np.ndarray) -> float:
    """Edge consistency between a super-resolved image and ground-truth edge pixels."""
    sr = np.asarray(sr)
    if sr.shape[:2] != np.shape(gt_edges):
        raise ShapeError(f"edge_f1: image {sr.shape} does not match edge map {np.shape(gt_edges)}")
    return binary_f1(extract_edges(sr), gt_edges)


def evaluate(sr: np.ndarray, hr: np.ndarray, gt_edges: np.ndarray) -> MetricReport:
    return MetricReport(psnr=psnr(sr, hr), ssim=ssim(sr, hr), edge_f1=edge_f1(sr, gt_edges))


def bicubic_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    """Per-channel bicubic resize (Pillow, float mode), clamped to [0, 1]."""
    lr = np.asarray(lr, dtype=np.float32)
    height, width = lr.shape[0] * scale, lr.shape[1] * scale
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(lr[..., c])).resize((width, height), Image.Resampling.BICUBIC))
        for c in range(lr.shape[2])
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)


def mean_reports(reports) -> MetricReport:
    """Averages a list of reports (an infinite PSNR keeps the mean infinite)."""
    reports = list(reports)
    return MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        edge_f1=float(np.mean([r.edge_f1 for r in reports])),
        notes={"count": str(len(reports))},
    )

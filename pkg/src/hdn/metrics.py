"""PSNR / SSIM scoring against ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from ._validation import check_same_shape

PSNR_INF = math.inf  # sentinel for a perfect prediction (MSE == 0)


def psnr(gt, pred, data_range: float) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    check_same_shape(gt, pred, ("gt", "pred"))
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = np.mean((gt - pred) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10 * np.log10(data_range ** 2 / mse))


def ssim(gt, pred, data_range: float, window: int = 11, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    check_same_shape(gt, pred, ("gt", "pred"))
    if min(gt.shape) < window:
        raise ValueError(f"images must be at least {window} pixels per side")
    # skimage derives the truncation from sigma; truncate=3.5 gives the 11-tap window
    return float(structural_similarity(
        gt, pred, data_range=data_range, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=k1, K2=k2, win_size=window))


@dataclass
class MetricReport:
    names: list[str]
    psnr: list[float]
    ssim: list[float]
    data_range: float
    range_policy: str = "gt min-max over dataset"
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.psnr, dtype=np.float64)
        s = np.asarray(self.ssim, dtype=np.float64)
        with np.errstate(invalid="ignore"):  # std of all-inf sentinels is nan
            p_std = float(p.std())
        self.summary = {
            "psnr_mean": float(p.mean()), "psnr_std": p_std,
            "ssim_mean": float(s.mean()), "ssim_std": float(s.std()),
        }


def dataset_range(gts) -> float:
    lo = min(float(np.min(g)) for g in gts)
    hi = max(float(np.max(g)) for g in gts)
    return hi - lo


def evaluate_pairs(gts, preds, names=None, data_range: float | None = None) -> MetricReport:
    if len(gts) != len(preds):
        raise ValueError("need as many predictions as ground-truth images")
    if data_range is None:
        data_range = dataset_range(gts)
    names = names or [str(i) for i in range(len(gts))]
    ps = [psnr(g, p, data_range) for g, p in zip(gts, preds)]
    ss = [ssim(g, p, data_range) for g, p in zip(gts, preds)]
    return MetricReport(list(names), ps, ss, data_range)

"""Image-quality metrics: NMAE, NMSE, PSNR, SSIM and aggregated reports."""
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import UndefinedMetricError

PSNR_CAP_DB = 99.0


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def nmae(pred, target):
    """sum |pred - target| / sum |target| (target-normalized)."""
    pred, target = _pair(pred, target)
    denom = np.abs(target).sum()
    if denom == 0:
        raise UndefinedMetricError("NMAE undefined for an all-zero target")
    return float(np.abs(pred - target).sum() / denom)


def nmse(pred, target):
    """||pred - target||^2 / ||target||^2 (target-normalized)."""
    pred, target = _pair(pred, target)
    denom = np.sum(target * target)
    if denom == 0:
        raise UndefinedMetricError("NMSE undefined for an all-zero target")
    return float(np.sum((pred - target) ** 2) / denom)


def psnr(pred, target, data_range=2.0):
    """Peak signal-to-noise ratio in dB; identical inputs return ``PSNR_CAP_DB``."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    pred, target = _pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP_DB))


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(pred, target, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=2.0):
    pred, target = _pair(pred, target)
    if pred.ndim != 2 or min(pred.shape) < window:
        raise ValueError(f"SSIM needs 2-D images of at least {window}x{window}, got {pred.shape}")
    win = gaussian_window(window, sigma)

    def filt(a):
        return convolve2d(a, win, mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x, mu_y = filt(pred), filt(target)
    sxx = filt(pred * pred) - mu_x * mu_x
    syy = filt(target * target) - mu_y * mu_y
    sxy = filt(pred * target) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, target, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=2.0):
    """Mean Gaussian-weighted SSIM over all fully-covered window positions."""
    if np.array_equal(np.asarray(pred), np.asarray(target)):
        _pair(pred, target)
        if np.ndim(pred) != 2 or min(np.shape(pred)) < window:
            raise ValueError(f"SSIM needs 2-D images of at least {window}x{window}")
        return 1.0
    return float(np.clip(ssim_map(pred, target, window, sigma, k1, k2, data_range).mean(), -1.0, 1.0))


@dataclass
class MetricReport:
    nmae: float
    nmse: float
    psnr_db: float
    psnr_exact: bool
    ssim: float
    n_images: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(preds, targets, data_range=2.0):
    """Mean of each metric over paired images."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    if len(preds) != len(targets) or not preds:
        raise ValueError("need equally many (>= 1) predictions and targets")
    rows = [(nmae(p, t), nmse(p, t), psnr(p, t, data_range), ssim(p, t, data_range=data_range),
             np.array_equal(p, t)) for p, t in zip(preds, targets)]
    a = np.array([r[:4] for r in rows])
    return MetricReport(
        nmae=float(a[:, 0].mean()),
        nmse=float(a[:, 1].mean()),
        psnr_db=float(a[:, 2].mean()),
        psnr_exact=bool(all(r[4] for r in rows)),
        ssim=float(a[:, 3].mean()),
        n_images=len(rows),
    )

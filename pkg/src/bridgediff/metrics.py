"""Image-pair quality metrics: spectral angle, color-histogram distance,
SSIM, and PSNR/MSE.

The histogram distance is the mean over channels of the total-variation
distance between normalized 256-bin histograms; other histogram-based
"color distance" definitions exist, so values here are comparable only
within this codebase.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    per_image: dict[str, list[float]] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.ids)

    def add(self, image_id: str, values: dict[str, float]) -> None:
        self.ids.append(image_id)
        for name, v in values.items():
            self.per_image.setdefault(name, []).append(v)

    def means(self) -> dict[str, float]:
        out = {}
        for name, vals in self.per_image.items():
            finite = [v for v in vals if math.isfinite(v)]
            out[name] = float(np.mean(finite)) if finite else float("inf")
        return out


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty image")


def sam(a: np.ndarray, b: np.ndarray, return_skipped: bool = False):
    """Mean per-pixel spectral angle (radians) between CHW images.

    Pixels where either spectral vector has zero norm are skipped and
    counted; an all-zero-norm pair is an error.
    """
    _check_pair(a, b)
    av = a.reshape(a.shape[0], -1).astype(np.float64)
    bv = b.reshape(b.shape[0], -1).astype(np.float64)
    na = np.linalg.norm(av, axis=0)
    nb = np.linalg.norm(bv, axis=0)
    valid = (na > 0) & (nb > 0)
    skipped = int(np.size(valid) - np.count_nonzero(valid))
    if not valid.any():
        raise ValueError("every pixel has a zero-norm spectral vector")
    cos = np.sum(av[:, valid] * bv[:, valid], axis=0) / (na[valid] * nb[valid])
    ang = float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))
    if return_skipped:
        return ang, skipped
    return ang


def chd(a: np.ndarray, b: np.ndarray, bins: int = 256) -> float:
    """Mean per-channel total-variation distance between normalized
    histograms of [0, 1] images. 0 iff all per-channel histograms match."""
    _check_pair(a, b)
    total = 0.0
    edges = np.linspace(0.0, 1.0, bins + 1)
    for c in range(a.shape[0]):
        ha, _ = np.histogram(a[c].reshape(-1), bins=edges)
        hb, _ = np.histogram(b[c].reshape(-1), bins=edges)
        ha = ha / ha.sum()
        hb = hb / hb.sum()
        total += 0.5 * np.abs(ha - hb).sum()
    return float(total / a.shape[0])


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean SSIM over non-overlapping windows of the channel-mean images."""
    _check_pair(a, b)
    ga = a.mean(axis=0).astype(np.float64)
    gb = b.mean(axis=0).astype(np.float64)
    h, w = ga.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than {window}x{window} window")
    ny, nx = h // window, w // window
    ga = ga[:ny * window, :nx * window].reshape(ny, window, nx, window)
    gb = gb[:ny * window, :nx * window].reshape(ny, window, nx, window)
    mu_a = ga.mean(axis=(1, 3))
    mu_b = gb.mean(axis=(1, 3))
    var_a = ga.var(axis=(1, 3))
    var_b = gb.var(axis=(1, 3))
    cov = (ga * gb).mean(axis=(1, 3)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr_mse(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(MSE, PSNR in dB for unit peak); identical inputs give PSNR = inf."""
    _check_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    psnr = float("inf") if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    return mse, psnr


METRIC_COLUMNS = ("sam", "chd", "ssim", "psnr", "mse")


def evaluate_pair(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    mse, psnr = psnr_mse(pred, target)
    return {
        "sam": sam(pred, target),
        "chd": chd(pred, target),
        "ssim": ssim(pred, target),
        "psnr": psnr,
        "mse": mse,
    }


def report_csv(report: MetricReport) -> str:
    """One row per image plus a trailing mean row."""
    buf = io.StringIO()
    buf.write("id," + ",".join(METRIC_COLUMNS) + "\n")
    for i, image_id in enumerate(report.ids):
        vals = ",".join(f"{report.per_image[c][i]:.6g}" for c in METRIC_COLUMNS)
        buf.write(f"{image_id},{vals}\n")
    means = report.means()
    buf.write("mean," + ",".join(f"{means[c]:.6g}" for c in METRIC_COLUMNS) + "\n")
    return buf.getvalue()

"""Image quality metrics: SSIM, MAE in Hounsfield units, SNR and relative errors."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import HuScale, mu_to_hu
from .errors import InvalidArgument, UndefinedMetric
from .io import write_rows

__all__ = ["MetricReport", "REPORT_HEADER", "ssim", "ssim_map", "mae_hu", "snr_db", "rel_error",
           "radon_rel_error", "report"]

REPORT_HEADER = ("mae_hu", "ssim", "snr_db", "rel_error", "radon_rel_error")
SNR_CAP_DB = 300.0


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgument(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def _gauss(size, sigma):
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-t * t / (2 * sigma * sigma))
    return g / g.sum()


def _window_mean(a, g):
    # valid windows only, stride 1
    h = len(g)
    out = correlate1d(correlate1d(a, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    lo = h // 2
    return out[lo:a.shape[0] - (h - 1 - lo), lo:a.shape[1] - (h - 1 - lo)]


def ssim_map(x, y, win: int = 11, sigma: float = 1.5, dynamic_range: float | None = None) -> np.ndarray:
    """Windowed SSIM indices over all valid ``win x win`` Gaussian windows.

    ``L`` defaults to ``max(y) - min(y)``, so ``y`` is the reference.
    """
    x, y = _pair(x, y)
    if x.ndim != 2 or min(x.shape) < win:
        raise InvalidArgument(f"SSIM window {win} does not fit an image of shape {x.shape}")
    L = float(y.max() - y.min()) if dynamic_range is None else float(dynamic_range)
    if L <= 0:
        L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    g = _gauss(win, sigma)
    mx, my = _window_mean(x, g), _window_mean(y, g)
    vx = _window_mean(x * x, g) - mx * mx
    vy = _window_mean(y * y, g) - my * my
    cov = _window_mean(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(x, y, win: int = 11, sigma: float = 1.5, dynamic_range: float | None = None) -> float:
    return float(np.mean(ssim_map(x, y, win, sigma, dynamic_range)))


def mae_hu(x, y, scale: HuScale = HuScale()) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(mu_to_hu(x, scale) - mu_to_hu(y, scale))))


def _ref_norm(ref):
    n = float(np.linalg.norm(ref))
    if n == 0.0:
        raise UndefinedMetric("reference is identically zero")
    return n


def snr_db(x, ref) -> float:
    x, ref = _pair(x, ref)
    nr = _ref_norm(ref)
    d = float(np.linalg.norm(x - ref))
    if d == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 20.0 * math.log10(nr / d))


def rel_error(x, ref) -> float:
    x, ref = _pair(x, ref)
    return float(np.linalg.norm(x - ref)) / _ref_norm(ref)


def radon_rel_error(x, ref, projector) -> float:
    x, ref = _pair(x, ref)
    return rel_error(projector.forward(x), projector.forward(ref))


@dataclass(frozen=True)
class MetricReport:
    mae_hu: float
    ssim: float
    snr_db: float
    rel_error: float
    radon_rel_error: float

    def row(self):
        return astuple(self)

    def to_csv(self, path):
        write_rows(path, REPORT_HEADER, [self.row()])


def report(x, ref, projector=None, scale: HuScale = HuScale()) -> MetricReport:
    rr = radon_rel_error(x, ref, projector) if projector is not None else float("nan")
    return MetricReport(mae_hu(x, ref, scale), ssim(x, ref), snr_db(x, ref), rel_error(x, ref), rr)

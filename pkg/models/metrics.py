from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import signal

from models.errors import ShapeError
from models.tensor import Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b, op):
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """ 10 log10(peak^2 / MSE) over all channels pooled; identical inputs give +inf """
    a, b = _pair(a, b, "psnr")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / mse))


def cap_psnr(value):
    return min(value, PSNR_CAP)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a, b, window, c1, c2):
    def filt(x):
        return signal.convolve2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    sigma_a2 = filt(a * a) - mu_a * mu_a
    sigma_b2 = filt(b * b) - mu_b * mu_b
    sigma_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sigma_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (sigma_a2 + sigma_b2 + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak=1.0):
    """
    Windowed SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03) averaged over
    valid windows, then over channels. Accepts [H,W] or [C,H,W].
    """
    a, b = _pair(a, b, "ssim")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects [H,W] or [C,H,W], got {a.shape}")
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise ShapeError(f"ssim needs extents of at least {SSIM_WINDOW}, got {a.shape[1]}x{a.shape[2]}")
    window = gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    return float(np.mean([_ssim_channel(x, y, window, c1, c2) for x, y in zip(a, b)]))


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, name, psnr_db, ssim_value):
        self.names.append(name)
        self.psnr_db.append(psnr_db)
        self.ssim.append(ssim_value)

    @property
    def mean_psnr(self):
        return float(np.mean([cap_psnr(v) for v in self.psnr_db]))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    def to_frame(self):
        """ One row per image (PSNR capped) followed by a `mean` row """
        frame = pd.DataFrame({
            "image": self.names,
            "psnr": [cap_psnr(v) for v in self.psnr_db],
            "ssim": self.ssim,
        })
        mean_row = pd.DataFrame({"image": ["mean"], "psnr": [self.mean_psnr], "ssim": [self.mean_ssim]})
        return pd.concat([frame, mean_row], ignore_index=True)

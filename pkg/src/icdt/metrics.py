"""Image quality metrics: PSNR, SSIM, UIQM and a seam for an external LPIPS scorer.

Full-reference metrics take the dynamic range explicitly (255 for 8-bit
images, 2.0 for ``[-1, 1]`` tensors). UIQM expects RGB values on a 0..255
scale, which is what the reference formulation is tuned for.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from icdt import kernels

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.299, 0.587, 0.114])

UIQM_C1 = 0.0282
UIQM_C2 = 0.2953
UIQM_C3 = 3.5753
UIQM_BLOCK = 8
UICM_ALPHA = 0.1

CSV_COLUMNS = ["filename", "psnr", "ssim", "uiqm"]


class ParameterError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_value: float = 255.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_value * max_value / mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise ParameterError(f"expected a grayscale or RGB image, got shape {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim_map(a, b, max_value: float = 255.0) -> np.ndarray:
    """Local SSIM over every fully-inside 11×11 window of the luma channel."""
    a, b = _pair(a, b)
    a, b = to_luma(a), to_luma(b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ParameterError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    mu1 = _filter_valid(a, win)
    mu2 = _filter_valid(b, win)
    s11 = _filter_valid(a * a, win) - mu1 * mu1
    s22 = _filter_valid(b * b, win) - mu2 * mu2
    s12 = _filter_valid(a * b, win) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return num / den


def ssim(a, b, max_value: float = 255.0) -> float:
    return float(np.clip(ssim_map(a, b, max_value).mean(), -1.0, 1.0))


# --------------------------------------------------------------------------
# UIQM
# --------------------------------------------------------------------------

def _color(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ParameterError(f"UIQM needs an RGB image, got shape {img.shape}")
    if img.shape[0] < UIQM_BLOCK or img.shape[1] < UIQM_BLOCK:
        raise ParameterError(f"UIQM needs at least {UIQM_BLOCK}x{UIQM_BLOCK} pixels, got {img.shape[:2]}")
    return img


def trimmed_mean(x: np.ndarray, alpha: float = UICM_ALPHA) -> float:
    """Mean after dropping ceil(alpha·K) lowest and floor(alpha·K) highest samples."""
    x = np.sort(np.ravel(x))
    k = x.size
    lo = math.ceil(alpha * k)
    hi = math.floor(alpha * k)
    return float(x[lo:k - hi].mean())


def uicm(img) -> float:
    img = _color(img)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    mu_rg, mu_yb = trimmed_mean(rg), trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(var_rg + var_yb)


def _sobel_mag(ch: np.ndarray) -> np.ndarray:
    mag = np.hypot(ndimage.sobel(ch, 0), ndimage.sobel(ch, 1))
    peak = mag.max()
    return mag * (255.0 / peak) if peak > 0 else mag


def eme(ch: np.ndarray, block: int = UIQM_BLOCK) -> float:
    k2, k1 = ch.shape[0] // block, ch.shape[1] // block
    return 2.0 / (k1 * k2) * kernels.block_eme(ch, block)


def uism(img) -> float:
    img = _color(img)
    return float(sum(w * eme(_sobel_mag(img[..., c]) * img[..., c]) for c, w in enumerate(LUMA)))


def uiconm(img, block: int = UIQM_BLOCK) -> float:
    img = _color(img)
    k2, k1 = img.shape[0] // block, img.shape[1] // block
    return -1.0 / (k1 * k2) * kernels.block_amee(img, block)


def uiqm(img) -> float:
    return UIQM_C1 * uicm(img) + UIQM_C2 * uism(img) + UIQM_C3 * uiconm(img)


# --------------------------------------------------------------------------
# LPIPS seam and set evaluation
# --------------------------------------------------------------------------

Scorer = Callable[[np.ndarray, np.ndarray], float]


def lpips_hook(a, b, scorer: Optional[Scorer] = None) -> Optional[float]:
    """Delegate to a user-supplied perceptual scorer; ``None`` when none is given."""
    if scorer is None:
        return None
    return float(scorer(a, b))


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    uiqm: float
    lpips: Optional[float] = None


@dataclass
class SetEvaluation:
    names: list
    reports: list
    mean: MetricReport
    columns: list = field(default_factory=lambda: list(CSV_COLUMNS))

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            for name, r in zip(self.names, self.reports):
                row = [name, repr(r.psnr), repr(r.ssim), repr(r.uiqm)]
                if "lpips" in self.columns:
                    row.append(repr(r.lpips))
                w.writerow(row)


def evaluate_pair(enhanced, reference, max_value: float = 255.0, scorer: Optional[Scorer] = None) -> MetricReport:
    return MetricReport(
        psnr=psnr(enhanced, reference, max_value),
        ssim=ssim(enhanced, reference, max_value),
        uiqm=uiqm(enhanced),
        lpips=lpips_hook(enhanced, reference, scorer),
    )


def evaluate_set(pairs, names=None, scorer: Optional[Scorer] = None, max_value: float = 255.0) -> SetEvaluation:
    """Per-image metrics for ``(enhanced, reference)`` pairs plus their arithmetic mean."""
    pairs = list(pairs)
    if not pairs:
        raise ParameterError("evaluate_set needs at least one image pair")
    names = list(names) if names is not None else [f"{i:05d}" for i in range(len(pairs))]
    if len(names) != len(pairs):
        raise ParameterError(f"{len(names)} names for {len(pairs)} pairs")
    reports = [evaluate_pair(e, r, max_value, scorer) for e, r in pairs]
    mean = MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        uiqm=float(np.mean([r.uiqm for r in reports])),
        lpips=float(np.mean([r.lpips for r in reports])) if scorer is not None else None,
    )
    columns = CSV_COLUMNS + (["lpips"] if scorer is not None else [])
    return SetEvaluation(names, reports, mean, columns)

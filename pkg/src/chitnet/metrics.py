"""The six fusion-quality metrics: CC, EN, Q^AB/F, Q^CV, SCD and SSIM.

All functions take float images in [0, 1] of identical shape and return a
Python float. Degenerate cases (zero variance, zero gradient weight) yield 0.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .imaging import IMAGE_SUFFIXES, load_gray

METRIC_NAMES = ("cc", "en", "qabf", "qcv", "scd", "ssim")

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

# edge-preservation sigmoid constants (strength, orientation)
QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G = 0.9994, -15.0, 0.5
QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A = 0.9879, -22.0, 0.8

QCV_WINDOW = 16


def _f64(*imgs):
    out = [np.asarray(im, dtype=np.float64) for im in imgs]
    for im in out[1:]:
        if im.shape != out[0].shape:
            raise ValueError(f"shape mismatch: {out[0].shape} vs {im.shape}")
    return out


def _flat(x: np.ndarray) -> bool:
    # constant up to rounding noise, e.g. (v + 0.3) - v
    return np.ptp(x) <= 64 * np.finfo(np.float64).eps * np.max(np.abs(x))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 0 when either input has zero variance."""
    a, b = _f64(a, b)
    if a.size == 0 or _flat(a) or _flat(b):
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    return float(np.sum(da * db) / np.sqrt(np.sum(da * da) * np.sum(db * db)))


def metric_cc(fused, ir, vis) -> float:
    fused, ir, vis = _f64(fused, ir, vis)
    return (pearson(fused, ir) + pearson(fused, vis)) / 2.0


def metric_en(fused) -> float:
    (fused,) = _f64(fused)
    q = np.round(np.clip(fused, 0.0, 1.0) * 255.0).astype(np.int64)
    p = np.bincount(q.ravel(), minlength=256) / q.size
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p))) + 0.0


def metric_scd(fused, ir, vis) -> float:
    fused, ir, vis = _f64(fused, ir, vis)
    return pearson(fused - vis, ir) + pearson(fused - ir, vis)


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses with replicated borders."""
    return (ndimage.correlate(img, SOBEL_X, mode="nearest"),
            ndimage.correlate(img, SOBEL_Y, mode="nearest"))


def _strength_orientation(img):
    gx, gy = sobel(img * 255.0)
    g = np.hypot(gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(gx == 0.0, np.pi / 2, np.arctan(gy / np.where(gx == 0.0, 1.0, gx)))
    return g, a


def _preservation(g_src, a_src, g_f, a_f):
    big = np.maximum(g_src, g_f)
    small = np.minimum(g_src, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_g = np.where(big == 0.0, 1.0, small / np.where(big == 0.0, 1.0, big))
    rel_a = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    qg = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (rel_g - QABF_SIGMA_G)))
    qa = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (rel_a - QABF_SIGMA_A)))
    return qg * qa


def metric_qabf(fused, ir, vis) -> float:
    fused, ir, vis = _f64(fused, ir, vis)
    g_a, a_a = _strength_orientation(ir)
    g_b, a_b = _strength_orientation(vis)
    g_f, a_f = _strength_orientation(fused)
    den = np.sum(g_a + g_b)
    if den == 0.0:
        return 0.0
    num = np.sum(_preservation(g_a, a_a, g_f, a_f) * g_a + _preservation(g_b, a_b, g_f, a_f) * g_b)
    return float(num / den)


def _freqspace(n: int) -> np.ndarray:
    if n % 2 == 0:
        return np.arange(-n // 2, n // 2) / (n / 2)
    return np.arange(-(n - 1) // 2, (n - 1) // 2 + 1) / (n / 2)


def csf_filter(h: int, w: int) -> np.ndarray:
    """Mannos-Sakrison contrast sensitivity on a centred frequency grid."""
    u, v = np.meshgrid(_freqspace(w) * (w / 8.0), _freqspace(h) * (h / 8.0))
    r = np.sqrt(u * u + v * v)
    return 2.6 * (0.0192 + 0.144 * r) * np.exp(-((0.144 * r) ** 1.1))


def metric_qcv(fused, ir, vis, window: int = QCV_WINDOW) -> float:
    """Chen-Varshney quality (lower is better), on the 0..255 intensity scale.

    Images are cropped to a whole number of ``window``-sized regions; an image
    smaller than one window uses a window of its shorter side.
    """
    fused, ir, vis = _f64(fused, ir, vis)
    h, w = fused.shape
    win = min(window, h, w)
    hh, wc = (h // win) * win, (w // win) * win
    fused, ir, vis = (x[:hh, :wc] * 255.0 for x in (fused, ir, vis))
    csf = csf_filter(hh, wc)
    num = den = 0.0
    for src in (ir, vis):
        gx, gy = sobel(src)
        g = np.hypot(gx, gy)
        lam = g.reshape(hh // win, win, wc // win, win).sum(axis=(1, 3)) ** 2
        diff = src - fused
        filt = np.real(np.fft.ifft2(np.fft.ifftshift(np.fft.fftshift(np.fft.fft2(diff)) * csf)))
        dist = (filt * filt).reshape(hh // win, win, wc // win, win).mean(axis=(1, 3))
        num += float(np.sum(lam * dist))
        den += float(np.sum(lam))
    if den == 0.0:
        return 0.0
    return num / den


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(x: np.ndarray, y: np.ndarray, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity over fully-overlapping Gaussian windows."""
    x, y = _f64(x, y)
    win_size = min(win_size, *x.shape)
    if win_size % 2 == 0:
        win_size -= 1
    win = _gaussian_window(win_size, sigma)
    filt = lambda z: signal.correlate2d(z, win, mode="valid")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())


def metric_ssim(fused, ir, vis) -> float:
    return ssim(fused, ir) + ssim(fused, vis)


def all_metrics(fused, ir, vis) -> dict[str, float]:
    return {
        "cc": metric_cc(fused, ir, vis),
        "en": metric_en(fused),
        "qabf": metric_qabf(fused, ir, vis),
        "qcv": metric_qcv(fused, ir, vis),
        "scd": metric_scd(fused, ir, vis),
        "ssim": metric_ssim(fused, ir, vis),
    }


@dataclass
class MetricsReport:
    rows: list[tuple[str, dict[str, float]]]
    unmatched: list[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for _, r in self.rows])

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(self.column(k).mean()) for k in METRIC_NAMES}

    @property
    def std(self) -> dict[str, float]:
        return {k: float(self.column(k).std()) for k in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["file", *METRIC_NAMES])
        for name, vals in self.rows:
            wr.writerow([name, *(f"{vals[k]:.10g}" for k in METRIC_NAMES)])
        for label, agg in (("mean", self.mean), ("std", self.std)):
            wr.writerow([label, *(f"{agg[k]:.10g}" for k in METRIC_NAMES)])
        return buf.getvalue()

    def format_table(self) -> str:
        names = [n for n, _ in self.rows] + ["mean", "std"]
        width = max(len(n) for n in names + ["file"])
        lines = [f"{'file':<{width}}  " + "  ".join(f"{k.upper():>10}" for k in METRIC_NAMES)]
        for name, vals in self.rows + [("mean", self.mean), ("std", self.std)]:
            lines.append(f"{name:<{width}}  " + "  ".join(f"{vals[k]:>10.4f}" for k in METRIC_NAMES))
        return "\n".join(lines)


def _images(d: Path) -> set[str]:
    return {p.name for p in Path(d).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_corpus(fused_dir: str | os.PathLike, ir_dir: str | os.PathLike,
                    vis_dir: str | os.PathLike, jobs: int = 1) -> MetricsReport:
    """Score every file name present in all three directories.

    Names missing from any directory are reported in ``unmatched``. Output
    order is sorted by name regardless of ``jobs``.
    """
    sets = [_images(Path(d)) for d in (fused_dir, ir_dir, vis_dir)]
    common = sorted(set.intersection(*sets))
    unmatched = sorted(set.union(*sets) - set(common))

    def score(name):
        f, a, b = (load_gray(Path(d) / name) for d in (fused_dir, ir_dir, vis_dir))
        return name, all_metrics(f, a, b)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(score, common))
    else:
        rows = [score(n) for n in common]
    return MetricsReport(rows, unmatched)

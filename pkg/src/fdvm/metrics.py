"""PSNR and SSIM image quality metrics, plus dataset-level evaluation.

Both metrics assume float images in [0,1] (peak 1.0). SSIM follows the
universal reference formulation: per-channel 11x11 Gaussian window with
sigma 1.5, K1=0.01, K2=0.03, biased local moments, averaged over window
positions and channels. Identical images score (inf, 1.0); infinite PSNR
values are excluded from dataset means and counted separately.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

__all__ = ["psnr", "ssim", "MetricReport", "evaluate",
           "write_report", "read_report"]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2D image with a 1D window."""
    k = win.size
    v = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    v = np.tensordot(v, win, axes=([2], [0]))
    v = np.lib.stride_tricks.sliding_window_view(v, k, axis=1)
    return np.tensordot(v, win, axes=([2], [0]))


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over channels and window positions.

    Images smaller than the 11x11 window fall back to a centered window of
    odd size min(H,W) (rounded down to odd).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim: expects (C,H,W) or (H,W), got {a.shape}")
    H, W = a.shape[1:]
    size = min(11, H, W)
    if size % 2 == 0:
        size -= 1
    win = _gaussian_window(size)

    c1 = k1 * k1    # L = 1
    c2 = k2 * k2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = _filter_valid(x, win)
        my = _filter_valid(y, win)
        mxx = _filter_valid(x * x, win)
        myy = _filter_valid(y * y, win)
        mxy = _filter_valid(x * y, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """Per-image scores and dataset means (finite-PSNR mean)."""
    entries: list = field(default_factory=list)   # (path, psnr, ssim)
    missing: list = field(default_factory=list)   # paths without predictions

    @property
    def count(self) -> int:
        return len(self.entries)

    @property
    def psnr_inf_count(self) -> int:
        return sum(1 for _, p, _ in self.entries if math.isinf(p))

    @property
    def mean_psnr(self) -> float:
        finite = [p for _, p, _ in self.entries if math.isfinite(p)]
        return float(np.mean(finite)) if finite else math.nan

    @property
    def mean_ssim(self) -> float:
        if not self.entries:
            return math.nan
        return float(np.mean([s for _, _, s in self.entries]))


def evaluate(pairs) -> MetricReport:
    """Score (path, prediction, target) triples; prediction None -> missing."""
    report = MetricReport()
    for path, pred, target in pairs:
        if pred is None:
            report.missing.append(str(path))
            continue
        report.entries.append((str(path), psnr(pred, target), ssim(pred, target)))
    return report


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    if math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def write_report(report: MetricReport, path):
    lines = [f"{p}\t{_fmt(ps)}\t{_fmt(ss)}" for p, ps, ss in report.entries]
    lines.append(f"MEAN\t{_fmt(report.mean_psnr)}\t{_fmt(report.mean_ssim)}")
    lines.append(f"INF\t{report.psnr_inf_count}")
    lines.append(f"COUNT\t{report.count}")
    for m in report.missing:
        lines.append(f"MISSING\t{m}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> MetricReport:
    """Parse a report file back; the round trip is the format's own test."""
    report = MetricReport()
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == "MISSING" and len(parts) == 2:
            report.missing.append(parts[1])
        elif parts[0] in ("MEAN", "INF", "COUNT"):
            continue    # derived footer values
        elif len(parts) == 3:
            report.entries.append((parts[0], float(parts[1]), float(parts[2])))
        else:
            raise FormatError(f"{path}:{ln}: malformed report line")
    return report

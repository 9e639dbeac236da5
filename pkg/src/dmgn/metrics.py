"""PSNR / SSIM and corpus-level reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_NOTE = "SSIM: per-channel 11x11 Gaussian window (sigma 1.5), L=1, valid positions, channel mean; no luminance conversion"


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError(f"psnr: max_val must be > 0, got {max_val}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val * max_val / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation keeping only windows fully inside the image
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j : w - k + 1 + j] for j in range(k))


def _ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    g = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity over valid window positions.

    Accepts (H, W) or (C, H, W); multi-channel input is the mean of the
    per-channel values. Identical inputs return exactly 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim: expected (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[1]}x{a.shape[2]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean([_ssim_channel(x, y, data_range) for x, y in zip(a, b)]))


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def std_psnr(self) -> float:
        return float(np.std(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def std_ssim(self) -> float:
        return float(np.std(self.ssim))

    def table(self) -> str:
        lines = [f"# {SSIM_NOTE}", f"{'id':<12}{'PSNR(dB)':>12}{'SSIM':>10}"]
        for i, p, s in zip(self.ids, self.psnr, self.ssim):
            lines.append(f"{i:<12}{p:>12.4f}{s:>10.4f}")
        lines.append(f"{'mean':<12}{self.mean_psnr:>12.4f}{self.mean_ssim:>10.4f}")
        lines.append(f"{'std':<12}{self.std_psnr:>12.4f}{self.std_ssim:>10.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "psnr", "ssim"])
        for row in zip(self.ids, self.psnr, self.ssim):
            writer.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


def evaluate_corpus(restore: Callable[[Sequence], Sequence[np.ndarray]], corpus: Sequence) -> MetricReport:
    """Score ``restore(triples) -> restored backgrounds`` against ground truth.

    ``restore`` receives the whole list of triples so it can batch.
    """
    if not corpus:
        raise ValueError("evaluate_corpus: corpus is empty")
    restored = restore(corpus)
    report = MetricReport()
    for k, (tr, out) in enumerate(zip(corpus, restored)):
        out = np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)
        report.ids.append(tr.id or f"{k:05d}")
        report.psnr.append(psnr(out, tr.background))
        report.ssim.append(ssim(out, tr.background))
    return report


def identity_restorer(triples):
    """Returns each input unchanged."""
    return [tr.input for tr in triples]


def zero_restorer(triples):
    return [np.zeros_like(tr.background) for tr in triples]

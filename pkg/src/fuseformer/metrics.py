"""Fusion quality metrics: entropy, mutual information, SCD and SSIM."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("k1, k2 and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


DEFAULT_SSIM = SsimParams()


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalised 2-D Gaussian weights, ``size x size``."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim_map(a, b, p: SsimParams = DEFAULT_SSIM) -> np.ndarray:
    a, b = _pair(a, b)
    n = p.window_size
    if a.ndim != 2 or min(a.shape) < n:
        raise ValueError(f"image {a.shape} is smaller than the {n}x{n} SSIM window")
    w = gaussian_window(n, p.window_sigma)

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (n, n)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + p.c1) * (2 * cov + p.c2)
    den = (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2)
    return num / den


def ssim(a, b, p: SsimParams = DEFAULT_SSIM) -> float:
    """Mean Gaussian-weighted SSIM over all valid window positions."""
    return float(ssim_map(a, b, p).mean())


def quantize(img, bins: int = 256) -> np.ndarray:
    """Bin index ``min(floor(p * bins), bins - 1)`` per pixel."""
    px = np.asarray(img, dtype=np.float64)
    return np.minimum(np.floor(px * bins), bins - 1).astype(np.int64)


def _entropy_of(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def entropy(img, bins: int = 256) -> float:
    """Shannon entropy (bits) of the intensity histogram."""
    q = quantize(img, bins).ravel()
    return _entropy_of(np.bincount(q, minlength=bins).astype(np.float64))


def joint_histogram(a, b, bins: int = 256) -> np.ndarray:
    a, b = _pair(a, b)
    qa, qb = quantize(a, bins).ravel(), quantize(b, bins).ravel()
    return np.bincount(qa * bins + qb, minlength=bins * bins).reshape(bins, bins).astype(np.float64)


def mutual_information(a, b, bins: int = 256) -> float:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    joint = joint_histogram(a, b, bins)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log2(pxy[nz] / (px @ py)[nz])).sum())
    return max(mi, 0.0)


def correlation(a, b) -> float:
    """Pearson r; zero when either side has variance below 1e-15."""
    a, b = _pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    va, vb = (da * da).mean(), (db * db).mean()
    if va < 1e-15 or vb < 1e-15:
        return 0.0
    return float((da * db).mean() / np.sqrt(va * vb))


def scd(fused, vis, ir) -> float:
    """Sum of correlations of differences."""
    f, v = _pair(fused, vis)
    _, i = _pair(fused, ir)
    return correlation(f - v, i) + correlation(f - i, v)


@dataclass
class MetricRow:
    id: str
    entropy: float
    scd: float
    mi: float
    ssim: float
    ssim_vis: float
    ssim_ir: float
    mi_vis: float
    mi_ir: float


CSV_COLUMNS = ("id", "entropy", "scd", "mi", "ssim", "ssim_vis", "ssim_ir", "mi_vis", "mi_ir")


def evaluate_fused(pid: str, fused, vis, ir, p: SsimParams = DEFAULT_SSIM, bins: int = 256) -> MetricRow:
    """Metrics for one fused image.

    ``mi`` is MI(F, vis) + MI(F, ir) and ``ssim`` the mean of SSIM(F, vis) and
    SSIM(F, ir); the per-reference parts are kept in the extra columns.
    """
    s_v, s_i = ssim(fused, vis, p), ssim(fused, ir, p)
    m_v, m_i = mutual_information(fused, vis, bins), mutual_information(fused, ir, bins)
    return MetricRow(
        id=pid,
        entropy=entropy(fused, bins),
        scd=scd(fused, vis, ir),
        mi=m_v + m_i,
        ssim=0.5 * (s_v + s_i),
        ssim_vis=s_v,
        ssim_ir=s_i,
        mi_vis=m_v,
        mi_ir=m_i,
    )


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def aggregate(self) -> MetricRow | None:
        if not self.rows:
            return None
        vals = {c: float(np.mean([getattr(r, c) for r in self.rows])) for c in CSV_COLUMNS[1:]}
        return MetricRow(id="AGGREGATE", **vals)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        agg = self.aggregate()
        for row in self.rows + ([agg] if agg else []):
            writer.writerow([row.id] + [f"{getattr(row, c):.6f}" for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

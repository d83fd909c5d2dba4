"""Image-pair evaluation: MSE, windowed SSIM, and PSNR.

All metrics run on [-1, 1]-scaled images (per-image linear min-max;
constant images map to zeros). SSIM uses K1 = 0.01, K2 = 0.03 and a
dynamic range of 2 by default, with an 11x11 sigma-1.5 Gaussian window.

PSNR comes in two variants: ``paper`` evaluates
20*log10(max(G)/MSE(L, G)) exactly as defined for this pipeline, and
``standard`` uses the conventional root, 20*log10(max(G)/sqrt(MSE)).
The two satisfy psnr_standard = psnr_paper + 10*log10(MSE) identically.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError, UndefinedMetricError
from .projector import ProjectionImage


@dataclass(frozen=True)
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 2.0  # [-1, 1] images
    window: str = "gaussian"  # "gaussian" | "uniform"
    window_size: int = 11
    gaussian_sigma: float = 1.5

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ParameterError("K1, K2 and the dynamic range must be > 0")
        if self.window not in ("gaussian", "uniform"):
            raise ParameterError(f"window must be 'gaussian' or 'uniform', got {self.window!r}")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ParameterError(f"window size must be odd and >= 1, got {self.window_size}")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    def window_weights(self):
        """Normalized window, sums to 1."""
        n = self.window_size
        if self.window == "uniform":
            w = np.ones((n, n))
        else:
            half = (n - 1) / 2
            g = np.exp(-((np.arange(n) - half) ** 2) / (2 * self.gaussian_sigma**2))
            w = np.outer(g, g)
        return w / w.sum()


def _as_array(img):
    return np.asarray(img.data if isinstance(img, ProjectionImage) else img, dtype=np.float64)


def scale_to_unit_range(img):
    """Linear rescale to [-1, 1]; constant images map to all zeros."""
    data = _as_array(img)
    lo, hi = data.min(), data.max()
    if hi > lo:
        scaled = (data - lo) * (2.0 / (hi - lo)) - 1.0
    else:
        scaled = np.zeros_like(data)
    if isinstance(img, ProjectionImage):
        return ProjectionImage(dims=img.dims, spacing=img.spacing, data=scaled, modality=img.modality)
    return scaled


def mse(label, generated):
    """Mean squared pixel difference."""
    a, b = _as_array(label), _as_array(generated)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def ssim(label, generated, cfg=None):
    """Mean windowed structural similarity over all window positions."""
    cfg = cfg or SsimConfig()
    a, b = _as_array(label), _as_array(generated)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    n = cfg.window_size
    if min(a.shape) < n:
        raise DimensionError(f"image {a.shape} smaller than the {n}x{n} window")
    w = cfg.window_weights()
    r = n // 2

    def win_mean(img):
        full = ndimage.correlate(img, w, mode="constant")
        return full[r : img.shape[0] - r, r : img.shape[1] - r]

    mu_a = win_mean(a)
    mu_b = win_mean(b)
    var_a = win_mean(a * a) - mu_a * mu_a
    var_b = win_mean(b * b) - mu_b * mu_b
    cov = win_mean(a * b) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def psnr(label, generated, variant="paper"):
    """Peak signal-to-noise ratio in dB.

    variant='paper': 20*log10(max(G)/MSE); variant='standard':
    20*log10(max(G)/sqrt(MSE)). Raises UndefinedMetricError when MSE is 0
    (callers treat identical images as a perfect match).
    """
    if variant not in ("paper", "standard"):
        raise ParameterError(f"variant must be 'paper' or 'standard', got {variant!r}")
    err = mse(label, generated)
    if err == 0:
        raise UndefinedMetricError("PSNR undefined: images are identical (MSE = 0)")
    peak = float(_as_array(generated).max())
    if peak <= 0:
        raise UndefinedMetricError(f"PSNR undefined: max of generated image is {peak}")
    denom = err if variant == "paper" else math.sqrt(err)
    return 20.0 * math.log10(peak / denom)


@dataclass
class PairMetrics:
    pair_id: str
    mse: float
    ssim: float
    psnr_paper: float = None
    psnr_standard: float = None
    psnr_undefined: bool = False


@dataclass
class MetricsReport:
    pairs: list
    aggregates: dict
    scaling: dict = field(
        default_factory=lambda: {"range": [-1.0, 1.0], "method": "per-image linear min-max"}
    )

    def to_json(self):
        return json.dumps(
            {
                "scaling": self.scaling,
                "aggregates": self.aggregates,
                "pairs": [vars(p) for p in self.pairs],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        return cls(
            pairs=[PairMetrics(**p) for p in raw["pairs"]],
            aggregates=raw["aggregates"],
            scaling=raw["scaling"],
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "mse", "ssim", "psnr_paper", "psnr_standard"])
            for p in self.pairs:
                writer.writerow(
                    [
                        p.pair_id,
                        f"{p.mse:.9g}",
                        f"{p.ssim:.9g}",
                        "" if p.psnr_paper is None else f"{p.psnr_paper:.9g}",
                        "" if p.psnr_standard is None else f"{p.psnr_standard:.9g}",
                    ]
                )


def evaluate_set(pairs, cfg=None, ids=None):
    """Per-pair MSE/SSIM/PSNR plus mean/std aggregates.

    Each (label, generated) pair is [-1, 1]-scaled first. PSNR of an exact
    match is flagged undefined rather than aggregated.
    """
    if not pairs:
        raise ParameterError("evaluate_set needs at least one image pair")
    cfg = cfg or SsimConfig()
    if ids is None:
        ids = [f"pair_{i:04d}" for i in range(len(pairs))]
    rows = []
    for pair_id, (label, generated) in zip(ids, pairs):
        sl = scale_to_unit_range(label)
        sg = scale_to_unit_range(generated)
        row = PairMetrics(pair_id=pair_id, mse=mse(sl, sg), ssim=ssim(sl, sg, cfg))
        try:
            row.psnr_paper = psnr(sl, sg, "paper")
            row.psnr_standard = psnr(sl, sg, "standard")
        except UndefinedMetricError:
            row.psnr_undefined = True
        rows.append(row)

    def agg(values):
        values = [v for v in values if v is not None]
        if not values:
            return {"mean": None, "std": None}
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    aggregates = {
        "mse": agg([r.mse for r in rows]),
        "ssim": agg([r.ssim for r in rows]),
        "psnr_paper": agg([r.psnr_paper for r in rows]),
        "psnr_standard": agg([r.psnr_standard for r in rows]),
    }
    return MetricsReport(pairs=rows, aggregates=aggregates)

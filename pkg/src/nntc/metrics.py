"""Evaluation: patchwise unsmoothed SSIM, PSNR, and rate-distortion curves.

SSIM is computed over whole 8x8 patches with a uniform window (no Gaussian
smoothing), per channel, with biased (1/N) moments and the standard
stabilizers C1 = (0.01*L)^2, C2 = (0.03*L)^2 for dynamic range L.  Scores
are averaged over all patches and channels; 1.0 is a perfect
reconstruction.  Negative per-patch values are possible and reported raw;
only the summary field is clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import decode_image, encode_image
from .models import ResidualChainModel

SSIM_PATCH = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class SsimReport:
    """Raw per-(patch, channel) scores plus their mean."""

    scores: np.ndarray          # (patches, channels), raw
    mean: float                 # arithmetic mean of all raw scores
    clamped_mean: float         # mean clamped into [0, 1]
    grid_hw: tuple[int, int]


@dataclass
class RdPoint:
    iterations: int
    bpp: float
    mean_ssim: float


def ssim_patch(a, b, dynamic_range: float = 255.0) -> float:
    """SSIM of two single-channel patches over one uniform window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim_patch: shape mismatch {a.shape} vs {b.shape}")
    mu_a = a.mean()
    mu_b = b.mean()
    var_a = ((a - mu_a) ** 2).mean()
    var_b = ((b - mu_b) ** 2).mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    return float(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                 / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))


def ssim_image(a, b, dynamic_range: float = 255.0) -> SsimReport:
    """Average SSIM over non-overlapping 8x8 patches and all channels.

    Inputs are (C, H, W) with H and W divisible by 8.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if b.ndim == 2:
        b = b[None]
    if a.shape != b.shape:
        raise ValueError(f"ssim_image: shape mismatch {a.shape} vs {b.shape}")
    c, h, w = a.shape
    if h % SSIM_PATCH or w % SSIM_PATCH:
        raise ValueError(f"ssim_image: {h}x{w} not divisible into "
                         f"{SSIM_PATCH}x{SSIM_PATCH} patches")
    rows, cols = h // SSIM_PATCH, w // SSIM_PATCH
    scores = np.zeros((rows * cols, c))
    for r in range(rows):
        for q in range(cols):
            ys = slice(r * SSIM_PATCH, (r + 1) * SSIM_PATCH)
            xs = slice(q * SSIM_PATCH, (q + 1) * SSIM_PATCH)
            for ch in range(c):
                scores[r * cols + q, ch] = ssim_patch(a[ch, ys, xs], b[ch, ys, xs],
                                                      dynamic_range)
    mean = float(scores.mean())
    return SsimReport(scores=scores, mean=mean,
                      clamped_mean=min(max(mean, 0.0), 1.0), grid_hw=(rows, cols))


def psnr(a, b, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def rd_curve(model: ResidualChainModel, images, iteration_list) -> list[RdPoint]:
    """Encode/decode every image at each iteration count; one point per count.

    ``images`` are 8-bit (C, H, W) arrays.  bpp counts payload bits only
    (headers excluded).  Points come back sorted by bpp.
    """
    images = list(images)
    if not images:
        raise ValueError("rd_curve: empty image list")
    points = []
    for iters in iteration_list:
        ssims = []
        bpps = []
        for img in images:
            stream = encode_image(model, img, iters)
            recon = decode_image(model, stream)
            ssims.append(ssim_image(img, recon).mean)
            h, w = stream.header.height, stream.header.width
            bpps.append(len(stream.payload) * 8 / (h * w))
        points.append(RdPoint(iterations=int(iters), bpp=float(np.mean(bpps)),
                              mean_ssim=float(np.mean(ssims))))
    return sorted(points, key=lambda p: p.bpp)


def rd_curve_csv(points) -> str:
    """CSV text with header row; '.' decimal separator, sorted by bpp."""
    lines = ["iterations,bpp,mean_ssim"]
    for p in sorted(points, key=lambda q: q.bpp):
        lines.append(f"{p.iterations},{p.bpp:.6f},{p.mean_ssim:.6f}")
    return "\n".join(lines) + "\n"

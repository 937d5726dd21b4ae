"""Quality and rate analytics: PSNR, MS-SSIM, BD-rate, diagnostic maps."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataio import to_uint8
from .entropy import PMF_FLOOR, gaussian_pmf_numpy

PSNR_CAP = 100.0
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1, _K2 = 0.01, 0.03


@dataclass
class RDPoint:
    image: str
    lambda_id: int
    lambda_value: float
    bpp: float
    psnr: float
    msssim: float


def psnr(x, xhat):
    """Peak signal-to-noise ratio in dB on the 8-bit grid, capped at 100."""
    a = to_uint8(x).astype(np.float64)
    b = to_uint8(xhat).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(255.0**2 / mse))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_same(img, kernel):
    t = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(t, kernel, axis=1, mode="reflect")


def _ssim_parts(a, b, kernel):
    c1 = (_K1 * 1.0) ** 2
    c2 = (_K2 * 1.0) ** 2
    mu_a = _filter_same(a, kernel)
    mu_b = _filter_same(b, kernel)
    var_a = _filter_same(a * a, kernel) - mu_a * mu_a
    var_b = _filter_same(b * b, kernel) - mu_b * mu_b
    cov = _filter_same(a * b, kernel) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(lum.mean()), float(cs.mean())


def _downsample2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    t = img[:h, :w]
    return (t[0::2, 0::2] + t[1::2, 0::2] + t[0::2, 1::2] + t[1::2, 1::2]) / 4.0


def ms_ssim_levels(min_side):
    """5 scales at 160 px or above; fewer (renormalized weights) below."""
    if min_side >= 160:
        return 5
    levels = 1
    while levels < 5 and (min_side >> levels) >= 11:
        levels += 1
    return levels


def ms_ssim(x, xhat):
    """Multi-scale structural similarity on [0, 1] images of shape (3, H, W).

    11x11 Gaussian window (sigma 1.5) with the standard five scale weights;
    images too small for five dyadic scales use the leading weights,
    renormalized.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(xhat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    levels = ms_ssim_levels(min(a.shape[1], a.shape[2]))
    weights = np.asarray(_MSSSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    kernel = _gaussian_window()
    scores = []
    for c in range(a.shape[0]):
        pa, pb = a[c], b[c]
        value = 1.0
        for lvl in range(levels):
            lum, cs = _ssim_parts(pa, pb, kernel)
            if lvl < levels - 1:
                value *= max(cs, 0.0) ** weights[lvl]
                pa, pb = _downsample2(pa), _downsample2(pb)
            else:
                value *= max(lum * cs, 0.0) ** weights[lvl]
        scores.append(value)
    return float(np.mean(scores))


def bd_rate(test_rate, test_quality, anchor_rate, anchor_quality):
    """Average percent rate difference at equal quality (cubic-fit form).

    Fits log10(rate) as a cubic in quality for both curves, integrates over
    the shared quality interval, and returns (10^delta - 1) * 100; negative
    means the test curve needs fewer bits.
    """
    tr, tq = np.asarray(test_rate, dtype=np.float64), np.asarray(test_quality, dtype=np.float64)
    ar, aq = np.asarray(anchor_rate, dtype=np.float64), np.asarray(anchor_quality, dtype=np.float64)
    for r, q in ((tr, tq), (ar, aq)):
        if len(r) < 4 or len(q) != len(r):
            raise ValueError("BD-rate needs at least 4 aligned (rate, quality) points per curve")
        if (r <= 0).any():
            raise ValueError("rates must be positive")
    lo = max(tq.min(), aq.min())
    hi = min(tq.max(), aq.max())
    if hi <= lo:
        raise ValueError(f"quality ranges do not overlap: [{tq.min()}, {tq.max()}] vs [{aq.min()}, {aq.max()}]")
    fit_t = np.polyfit(tq, np.log10(tr), 3)
    fit_a = np.polyfit(aq, np.log10(ar), 3)
    int_t = np.polyval(np.polyint(fit_t), [lo, hi])
    int_a = np.polyval(np.polyint(fit_a), [lo, hi])
    avg_t = (int_t[1] - int_t[0]) / (hi - lo)
    avg_a = (int_a[1] - int_a[0]) / (hi - lo)
    return (10.0 ** (avg_t - avg_a) - 1.0) * 100.0


def rd_curve(points, quality_axis="psnr"):
    """Per-lambda means over an image set -> (rates, qualities), ascending bpp."""
    by_lambda = {}
    for p in points:
        by_lambda.setdefault(p.lambda_id, []).append(p)
    rows = []
    for pts in by_lambda.values():
        rows.append((
            float(np.mean([p.bpp for p in pts])),
            float(np.mean([getattr(p, quality_axis) for p in pts])),
        ))
    rows.sort()
    return np.array([r for r, _ in rows]), np.array([q for _, q in rows])


def bit_allocation_map(yhat, mean, sigma):
    """Per-location mean (over channels) of -log2 bin mass for the latent.

    Inputs are (1, M, h, w) arrays from the round-mode coding path.  Returns
    (map, total_bits) with map.sum() * M == total_bits.
    """
    pmf = np.maximum(gaussian_pmf_numpy(np.asarray(yhat, dtype=np.float64),
                                        np.asarray(mean, dtype=np.float64),
                                        np.asarray(sigma, dtype=np.float64)), PMF_FLOOR)
    bits = -np.log2(pmf)
    grid = bits.mean(axis=1)[0]
    return grid, float(bits.sum())


def attention_map(recorder, out_hw, side="enc", stage=None):
    """Mean prompt-column attention mass per image location, upsampled.

    Averages over heads (already folded into the records), layers of the
    chosen stage (the deepest recorded one by default), then nearest-
    neighbor upsamples to ``out_hw``.  Raises if recording never ran.
    """
    if not recorder.records:
        raise ValueError("attention recording disabled: no records present")
    stages = [tag[1] for tag, _ in recorder.records if tag[0] == side]
    if not stages:
        raise ValueError(f"no attention records for side {side!r}")
    stage = max(stages) if stage is None else stage
    grids = [g for tag, g in recorder.records if tag[0] == side and tag[1] == stage]
    if not grids:
        raise ValueError(f"no attention records for {side} stage {stage}")
    mean_grid = np.mean([g[0] for g in grids], axis=0)
    fh = out_hw[0] // mean_grid.shape[0]
    fw = out_hw[1] // mean_grid.shape[1]
    up = np.kron(mean_grid, np.ones((fh, fw)))
    return up[: out_hw[0], : out_hw[1]]

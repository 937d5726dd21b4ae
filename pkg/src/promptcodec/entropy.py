"""Quantization, likelihood models, and differentiable rate estimation.

Two likelihood models feed the coder: a per-channel learned factorized
density for the hyperlatent, and a conditional Gaussian (mean and scale
from the hyper path) for the latent.  Both report the probability of the
integer bin [v - 1/2, v + 1/2), which doubles as the differentiable rate
surrogate when evaluated at noise-quantized values.

Coding uses integer CDF tables at 16-bit precision over the fixed symbol
support [-128, 127]; latent scales are bucketed into a 64-entry
log-spaced table so tables can be shared.
"""

import numpy as np
from scipy import special as _sp

from . import autodiff as ad
from .autodiff import Tensor

PRECISION = 16
CDF_TOTAL = 1 << PRECISION
SUPPORT_MIN = -128
SUPPORT_MAX = 127
NUM_SYMBOLS = SUPPORT_MAX - SUPPORT_MIN + 1
SIGMA_MIN = 0.11
SIGMA_MAX = 256.0
SIGMA_LEVELS = 64
PMF_FLOOR = 2.0 ** (-PRECISION)
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))


def quantize(v, mode, rng=None):
    """Quantize a tensor: "round" snaps to integers (ties away from zero,
    straight-through gradient), "noise" adds Uniform[-1/2, 1/2) for training."""
    if mode == "round":
        return ad.round_ties_away(v)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise mode needs an rng")
        u = rng.uniform(-0.5, 0.5, size=v.shape).astype(v.data.dtype)
        return ad.add(v, Tensor(u))
    raise ValueError(f"unknown quantize mode {mode!r}")


def rate_bits(likelihood):
    """Total code length in bits: sum of -log2 p, with p floored at 2^-16."""
    p = ad.clamp_min(likelihood, PMF_FLOOR)
    return ad.mul(ad.tsum(ad.log(p)), -1.0 / np.log(2.0))


def gaussian_likelihood(values, mean, sigma):
    """P(round(v) = bin) under N(mean, sigma^2) convolved with the unit bin."""
    centered = ad.sub(values, mean)
    upper = ad.div(ad.add(centered, 0.5), sigma)
    lower = ad.div(ad.sub(centered, 0.5), sigma)
    hi = ad.erf(ad.mul(upper, _INV_SQRT2))
    lo = ad.erf(ad.mul(lower, _INV_SQRT2))
    return ad.mul(ad.sub(hi, lo), 0.5)


def gaussian_pmf_numpy(values, mean, sigma):
    """Plain-array version of :func:`gaussian_likelihood` for table building."""
    upper = (values - mean + 0.5) / sigma
    lower = (values - mean - 0.5) / sigma
    return 0.5 * (_sp.erf(upper * _INV_SQRT2) - _sp.erf(lower * _INV_SQRT2))


class FactorizedDensity:
    """Learned monotone per-channel CDF built from softplus-positive affine
    stages with bounded tanh gating.

    The cumulative c(x) is sigmoid(f_K(...f_1(x))) where
    f_k(x) = u + tanh(a_k) * tanh(u), u = softplus(H_k) x + b_k on inner
    stages and the final stage is affine.  Positivity of softplus(H_k) and
    |tanh(a_k)| < 1 keep c nondecreasing, so bin masses are nonnegative.
    """

    def __init__(self, channels, rng, filters=(3, 3, 3), init_scale=8.0, dtype=np.float32):
        self.channels = channels
        self.filters = (1,) + tuple(filters) + (1,)
        self.matrices = []
        self.biases = []
        self.gates = []
        k_stages = len(self.filters) - 1
        scale = init_scale ** (1.0 / k_stages)
        for k in range(k_stages):
            fan_in, fan_out = self.filters[k], self.filters[k + 1]
            init = np.log(np.expm1(1.0 / scale / fan_out))
            h = np.full((channels, fan_out, fan_in), init, dtype=dtype)
            b = rng.uniform(-0.5, 0.5, size=(channels, fan_out, 1)).astype(dtype)
            self.matrices.append(Tensor(h, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))
            if k < k_stages - 1:
                self.gates.append(Tensor(np.zeros((channels, fan_out, 1), dtype=dtype),
                                         requires_grad=True))

    def named_tensors(self):
        out = {}
        for k, (h, b) in enumerate(zip(self.matrices, self.biases)):
            out[f"density.h{k}"] = h
            out[f"density.b{k}"] = b
        for k, a in enumerate(self.gates):
            out[f"density.a{k}"] = a
        return out

    def cdf(self, x):
        """Cumulative at x: Tensor (channels, 1, n) -> Tensor (channels, 1, n)."""
        t = x
        n_stages = len(self.matrices)
        for k in range(n_stages):
            t = ad.add(ad.matmul(ad.softplus(self.matrices[k]), t), self.biases[k])
            if k < n_stages - 1:
                t = ad.add(t, ad.mul(ad.tanh(self.gates[k]), ad.tanh(t)))
        return ad.sigmoid(t)

    def likelihood(self, values):
        """Bin mass c(v + 1/2) - c(v - 1/2); values shaped (B, C, H, W)."""
        B, C, H, W = values.shape
        if C != self.channels:
            raise ValueError(f"values have {C} channels, density models {self.channels}")
        flat = ad.reshape(ad.transpose(values, (1, 0, 2, 3)), (C, 1, B * H * W))
        upper = self.cdf(ad.add(flat, 0.5))
        lower = self.cdf(ad.add(flat, -0.5))
        pmf = ad.sub(upper, lower)
        return ad.transpose(ad.reshape(pmf, (C, B, H, W)), (1, 0, 2, 3))

    def pmf_tables(self):
        """Float pmf per channel over the full symbol support: (C, 256)."""
        grid = np.arange(SUPPORT_MIN, SUPPORT_MAX + 1, dtype=np.float64)
        x = Tensor(np.broadcast_to(grid, (self.channels, 1, NUM_SYMBOLS)).copy())
        upper = self.cdf(ad.add(x, 0.5)).data
        lower = self.cdf(ad.add(x, -0.5)).data
        return (upper - lower).reshape(self.channels, NUM_SYMBOLS)

    def tail_mass(self):
        """(c at lower support edge, 1 - c at upper support edge) per channel."""
        edges = np.array([SUPPORT_MIN - 0.5, SUPPORT_MAX + 0.5], dtype=np.float64)
        x = Tensor(np.broadcast_to(edges, (self.channels, 1, 2)).copy())
        c = self.cdf(x).data.reshape(self.channels, 2)
        return c[:, 0], 1.0 - c[:, 1]


def quantize_pmf(pmf):
    """Turn a float pmf over the symbol support into an integer CDF.

    Every symbol keeps mass >= 1 so the coder can represent clamped
    outliers; the cdf is strictly increasing and ends exactly at 2^16.
    """
    p = np.maximum(np.asarray(pmf, dtype=np.float64), 0.0)
    n = p.size
    free = CDF_TOTAL - n
    total = p.sum()
    if total <= 0:
        scaled = np.full(n, free / n)
    else:
        scaled = p / total * free
    base = np.floor(scaled).astype(np.int64)
    remainder = free - int(base.sum())
    if remainder:
        frac = scaled - base
        order = np.argsort(-frac, kind="stable")
        base[order[:remainder]] += 1
    freq = base + 1
    cdf = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


def scale_table():
    """Log-spaced scale buckets shared by all conditional-Gaussian tables."""
    return np.exp(np.linspace(np.log(SIGMA_MIN), np.log(SIGMA_MAX), SIGMA_LEVELS))


def scale_to_bucket(sigma):
    """Smallest bucket with table scale >= sigma (clamped to the last)."""
    table = scale_table()
    idx = np.searchsorted(table, np.asarray(sigma, dtype=np.float64), side="left")
    return np.minimum(idx, SIGMA_LEVELS - 1)


def gaussian_cdf_tables():
    """Integer CDF per scale bucket for zero-mean residual symbols: (64, 257)."""
    grid = np.arange(SUPPORT_MIN, SUPPORT_MAX + 1, dtype=np.float64)
    tables = np.zeros((SIGMA_LEVELS, NUM_SYMBOLS + 1), dtype=np.int64)
    for i, s in enumerate(scale_table()):
        pmf = gaussian_pmf_numpy(grid, 0.0, s)
        tables[i] = quantize_pmf(pmf)
    return tables


def factorized_cdf_tables(density):
    """Integer CDF per channel of a :class:`FactorizedDensity`: (C, 257)."""
    pmfs = density.pmf_tables()
    tables = np.zeros((density.channels, NUM_SYMBOLS + 1), dtype=np.int64)
    for c in range(density.channels):
        tables[c] = quantize_pmf(pmfs[c])
    return tables


def symbols_from_values(values):
    """Integer values -> coder symbols, clamped to the fixed support."""
    v = np.clip(np.asarray(values), SUPPORT_MIN, SUPPORT_MAX).astype(np.int64)
    return v - SUPPORT_MIN


def values_from_symbols(symbols):
    return np.asarray(symbols, dtype=np.int64) + SUPPORT_MIN


def table_rate_bits(symbols, cdfs, table_idx):
    """Code length implied by the quantized tables: sum -log2(freq / total)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    table_idx = np.asarray(table_idx, dtype=np.int64)
    freq = cdfs[table_idx, symbols + 1] - cdfs[table_idx, symbols]
    return float(-np.log2(freq / CDF_TOTAL).sum())

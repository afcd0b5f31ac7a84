"""Blind Poisson-Gaussian noise estimation from patch statistics.

Pixel variance is modelled as affine in the local mean, ``v = a * m + b``. Each
non-overlapping patch has its best-fit plane removed; the residual variance is
regressed on the patch mean with an iteratively reweighted Huber fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .dataset import ImageBuffer

REFERENCE_INTENSITY = 0.5


class ImageTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    patch_size: int = 8
    min_patches: int = 4
    max_kurtosis: float = 6.0
    irls_iterations: int = 10
    huber_k: float = 1.345
    drop_saturated: bool = True
    # patches are used only where the fitted model expects fewer clipped pixels than this
    max_clip_fraction: float = 1e-3
    refit_passes: int = 2
    # below this spread of patch means the slope is unidentifiable; fit b alone
    min_mean_spread: float = 0.02


@dataclass(frozen=True)
class NoiseEstimate:
    a: float
    b: float
    n_patches: int = 0

    @property
    def sigma_ref(self) -> float:
        return math.sqrt(self.a * REFERENCE_INTENSITY + self.b)

    def variance_at(self, intensity: float) -> float:
        return self.a * intensity + self.b


def patch_statistics(pixels: np.ndarray, cfg: EstimatorConfig = EstimatorConfig()):
    """Return ``(means, variances, keep, saturated)`` for all non-overlapping patches."""
    p = cfg.patch_size
    h, w = pixels.shape
    ny, nx = h // p, w // p
    if ny == 0 or nx == 0:
        empty = np.empty(0, dtype=bool)
        return np.empty(0), np.empty(0), empty, empty
    block = pixels[: ny * p, : nx * p].reshape(ny, p, nx, p).transpose(0, 2, 1, 3).reshape(-1, p * p)

    yy, xx = np.mgrid[0:p, 0:p]
    design = np.column_stack([np.ones(p * p), xx.ravel() - (p - 1) / 2, yy.ravel() - (p - 1) / 2])
    hat = design @ np.linalg.pinv(design)
    resid = block - block @ hat.T

    means = block.mean(axis=1)
    dof = p * p - design.shape[1]
    variances = np.einsum("ij,ij->i", resid, resid) / dof

    m2 = np.mean(resid**2, axis=1)
    m4 = np.mean(resid**4, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        kurt = np.where(m2 > 0, m4 / np.where(m2 > 0, m2, 1.0) ** 2, 0.0)
    keep = kurt <= cfg.max_kurtosis
    saturated = np.any((block <= 0.0) | (block >= 1.0), axis=1)
    return means, variances, keep, saturated


def _robust_fit(x: np.ndarray, v: np.ndarray, with_slope: bool, with_intercept: bool, cfg: EstimatorConfig):
    cols = []
    if with_slope:
        cols.append(x)
    if with_intercept:
        cols.append(np.ones_like(x))
    design = np.column_stack(cols)

    coef = np.linalg.lstsq(design, v, rcond=None)[0]
    positive = v[v > 0]
    if positive.size == 0:
        return np.zeros(design.shape[1])
    floor = 1e-3 * float(np.median(positive))

    for _ in range(cfg.irls_iterations):
        fitted = np.maximum(design @ coef, floor)
        # sample variances scatter in proportion to their expectation
        rel = (v - fitted) / fitted
        mad = 1.4826 * float(np.median(np.abs(rel - np.median(rel))))
        if mad == 0.0:
            break
        delta = cfg.huber_k * mad
        absr = np.abs(rel)
        huber = np.where(absr <= delta, 1.0, delta / np.maximum(absr, 1e-300))
        sw = np.sqrt(huber) / fitted
        coef = np.linalg.lstsq(design * sw[:, None], v * sw, rcond=None)[0]
    return coef


def fit_variance_law(means: np.ndarray, variances: np.ndarray, cfg: EstimatorConfig = EstimatorConfig()):
    """Robust fit of ``variances ~ a * means + b`` with both coefficients clamped at 0."""
    if np.all(variances == 0.0):
        return 0.0, 0.0
    if np.ptp(means) < cfg.min_mean_spread:
        (b,) = _robust_fit(means, variances, False, True, cfg)
        return 0.0, max(float(b), 0.0)

    a, b = _robust_fit(means, variances, True, True, cfg)
    if a < 0:
        (b,) = _robust_fit(means, variances, False, True, cfg)
        return 0.0, max(float(b), 0.0)
    if b < 0:
        (a,) = _robust_fit(means, variances, True, False, cfg)
        return max(float(a), 0.0), 0.0
    return float(a), float(b)


def estimate_noise(image: ImageBuffer, cfg: EstimatorConfig = EstimatorConfig()) -> NoiseEstimate:
    pixels = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    means, variances, keep, saturated = patch_statistics(pixels, cfg)

    def fit(mask):
        usable = int(mask.sum())
        if usable < cfg.min_patches:
            raise ImageTooSmall(
                f"{pixels.shape[1]}x{pixels.shape[0]} image yields {usable} usable "
                f"{cfg.patch_size}x{cfg.patch_size} patches, need {cfg.min_patches}"
            )
        return fit_variance_law(means[mask], variances[mask], cfg), usable

    if not cfg.drop_saturated or not saturated.any():
        (a, b), usable = fit(keep)
        return NoiseEstimate(a, b, usable)

    # Dropping only the patches that happened to clip keeps the ones whose noise
    # leaned inward, biasing variance low. Select on the expected clip rate instead.
    (a, b), usable = fit(keep & ~saturated)
    for _ in range(cfg.refit_passes):
        mask = keep & (clip_fraction(means, a, b) < cfg.max_clip_fraction)
        if int(mask.sum()) < cfg.min_patches:
            break
        (a, b), usable = fit(mask)
    return NoiseEstimate(a, b, usable)


_erfc = np.frompyfunc(math.erfc, 1, 1)


def _normal_cdf(z) -> np.ndarray:
    return 0.5 * _erfc(-np.asarray(z, dtype=np.float64) / math.sqrt(2.0)).astype(np.float64)


def clip_fraction(means, a: float, b: float, max_terms: int = 400) -> np.ndarray:
    """Expected share of pixels at or beyond 0 or 1 for ``a * Poisson(m / a) + N(0, b)``.

    The lower tail is summed over Poisson counts because dark pixels are far from
    Gaussian; the upper tail uses the Gaussian approximation.
    """
    m = np.clip(np.asarray(means, dtype=np.float64), 0.0, 1.0)
    sd = np.sqrt(a * m + b)
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = np.where(sd > 0, _normal_cdf((m - 1.0) / np.where(sd > 0, sd, 1.0)), (m >= 1.0).astype(float))

    if b <= 0.0:
        lower = np.exp(-m / a) if a > 0 else (m <= 0.0).astype(float)
        return lower + upper
    # counts past this many contribute nothing: a * k is over 8 Gaussian sigmas above 0
    terms = int(math.ceil(8.0 * math.sqrt(b) / a)) + 1 if a > 0 else max_terms + 1
    if terms > max_terms:
        return _normal_cdf(-m / sd) + upper
    k = np.arange(terms)
    lam = m / a
    # Poisson pmf by recurrence, one row per patch
    pmf = np.empty((m.size, terms))
    pmf[:, 0] = np.exp(-lam)
    for i in range(1, terms):
        pmf[:, i] = pmf[:, i - 1] * lam / i
    lower = pmf @ _normal_cdf(-a * k / math.sqrt(b))
    return lower + upper


def summarize_noise(estimate: NoiseEstimate, decimals: int = 3) -> float:
    """``sigma_ref`` rounded half-up to ``decimals`` places."""
    if not 1 <= decimals <= 6:
        raise ValueError(f"decimals must be in [1, 6], got {decimals}")
    quantum = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(estimate.sigma_ref)).quantize(quantum, rounding=ROUND_HALF_UP))


def poisson_gaussian(clean: np.ndarray, a: float, b: float, rng: np.random.Generator) -> np.ndarray:
    """Apply ``a * Poisson(clean / a) + N(0, b)``, giving variance ``a * clean + b``."""
    clean = np.asarray(clean, dtype=np.float64)
    out = clean.copy()
    if a > 0:
        out = a * rng.poisson(clean / a)
    if b > 0:
        out = out + rng.normal(0.0, math.sqrt(b), size=clean.shape)
    return out

"""Differentiable multi-scale structural similarity on flat image batches.

Local window statistics are computed as matrix products against precomputed
Gaussian-window matrices (one row per valid window position), so the whole
metric stays inside the tape without convolution kernels. Dyadic
downsampling is a fixed 2x2 average-pool matrix.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..tensor import Tensor, clamp, exp, log, matmul, transpose

__all__ = ["msssim", "max_feasible_scales", "MSSSIM_WEIGHTS"]

# Canonical five-scale weights; renormalized to the scale count in use.
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2
_WINDOW_SIGMA = 1.5


@lru_cache(maxsize=None)
def _window_matrix(h: int, w: int, window: int) -> np.ndarray:
    """[n_positions, h*w] matrix of Gaussian windows at every valid offset."""
    g = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-(g ** 2) / (2.0 * _WINDOW_SIGMA ** 2))
    kernel = np.outer(g, g)
    kernel /= kernel.sum()
    rows = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            flat = np.zeros((h, w))
            flat[i:i + window, j:j + window] = kernel
            rows.append(flat.reshape(-1))
    return np.asarray(rows)


@lru_cache(maxsize=None)
def _pool_matrix(h: int, w: int) -> np.ndarray:
    """[floor(h/2)*floor(w/2), h*w] 2x2 average-pool matrix."""
    h2, w2 = h // 2, w // 2
    rows = []
    for i in range(h2):
        for j in range(w2):
            flat = np.zeros((h, w))
            flat[2 * i:2 * i + 2, 2 * j:2 * j + 2] = 0.25
            rows.append(flat.reshape(-1))
    return np.asarray(rows)


def max_feasible_scales(h: int, w: int, window: int) -> int:
    """Largest scale count with every dyadic downsample still >= window."""
    scales = 0
    while min(h, w) >= window:
        scales += 1
        h, w = h // 2, w // 2
    return scales


def _ssim_terms(x: Tensor, y: Tensor, h: int, w: int, window: int
                ) -> tuple[Tensor, Tensor]:
    """Mean luminance and contrast-structure terms per sample at one scale."""
    gmat = Tensor(_window_matrix(h, w, window).T)  # [hw, P]
    mu_x = matmul(x, gmat)
    mu_y = matmul(y, gmat)
    var_x = matmul(x.square(), gmat) - mu_x.square()
    var_y = matmul(y.square(), gmat) - mu_y.square()
    cov = matmul(x * y, gmat) - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + _C1) / (mu_x.square() + mu_y.square() + _C1)
    cs = (2.0 * cov + _C2) / (var_x + var_y + _C2)
    return lum.mean(axis=1), cs.mean(axis=1)


def msssim(x: Tensor, y: Tensor, image_shape: tuple, window: int = 11,
           scales: int = 2) -> Tensor:
    """MS-SSIM per batch row for flat [batch, H*W] tensors in [0, 1].

    Contrast-structure enters at every scale, luminance only at the
    coarsest; exponents are the canonical weights renormalized to
    ``scales``. Raises if the image cannot support the requested scales.
    """
    h, w = image_shape
    if scales < 1 or scales > len(MSSSIM_WEIGHTS):
        raise ValueError(f"scales must lie in [1, {len(MSSSIM_WEIGHTS)}]")
    feasible = max_feasible_scales(h, w, window)
    if scales > feasible:
        raise ValueError(
            f"image {h}x{w} with window {window} supports at most "
            f"{feasible} scale(s), requested {scales}")
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()

    log_total = None
    cur_x, cur_y, ch, cw = x, y, h, w
    for s in range(scales):
        lum, cs = _ssim_terms(cur_x, cur_y, ch, cw, window)
        term = lum * cs if s == scales - 1 else cs
        contrib = float(weights[s]) * log(clamp(term, min=1e-6))
        log_total = contrib if log_total is None else log_total + contrib
        if s < scales - 1:
            pool = Tensor(_pool_matrix(ch, cw).T)
            cur_x = matmul(cur_x, pool)
            cur_y = matmul(cur_y, pool)
            ch, cw = ch // 2, cw // 2
    return exp(log_total)

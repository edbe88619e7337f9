"""Image quality metrics and the SSIM training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SSIMConfig:
    """Uniform-window SSIM.

    ``data_range=None`` takes the maximum of the reference image. Window
    covariances use the unbiased ``n / (n - 1)`` normalization.
    """

    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None

    def __post_init__(self):
        if self.window < 2 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")


def _box(a: np.ndarray, k: int) -> np.ndarray:
    """Sum over every fully contained ``k x k`` window."""
    return sliding_window_view(a, (k, k)).sum(axis=(-2, -1))


def _box_adjoint(a: np.ndarray, k: int) -> np.ndarray:
    """Transpose of :func:`_box`: spread window values back onto pixels."""
    return _box(np.pad(a, k - 1), k)


def _stats(x, y, cfg: SSIMConfig):
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"SSIM needs two equal 2-D images, got {x.shape} and {y.shape}")
    k = cfg.window
    if min(x.shape) < k:
        raise ValueError(f"image {x.shape} smaller than the {k}x{k} window")
    L = float(np.max(y)) if cfg.data_range is None else float(cfg.data_range)
    if L <= 0:
        raise ValueError("SSIM data range must be positive (all-zero reference?)")
    npix = k * k
    r = npix / (npix - 1)
    mx = _box(x, k) / npix
    my = _box(y, k) / npix
    sxx = r * (_box(x * x, k) / npix - mx * mx)
    syy = r * (_box(y * y, k) / npix - my * my)
    sxy = r * (_box(x * y, k) / npix - mx * my)
    c1 = (cfg.k1 * L) ** 2
    c2 = (cfg.k2 * L) ** 2
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    s = (a1 * a2) / (b1 * b2)
    return s, (mx, my, a1, a2, b1, b2, r, npix)


def ssim_map(x: np.ndarray, y: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    return _stats(x, y, cfg)[0]


def ssim(x: np.ndarray, y: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Mean SSIM over all valid window positions; ``y`` is the reference."""
    return float(ssim_map(x, y, cfg).mean())


def ssim_grad(x: np.ndarray, y: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    """Gradient of :func:`ssim` with respect to ``x`` (data range held fixed)."""
    s, (mx, my, a1, a2, b1, b2, r, npix) = _stats(x, y, cfg)
    k = cfg.window
    # d s_w / d x_i = 2/npix * (alpha_w + beta_w * y_i + gamma_w * x_i)
    alpha = s * (my / a1 - mx / b1) + r * s * (mx / b2 - my / a2)
    beta = r * s / a2
    gamma = -r * s / b2
    scale = 2.0 / (npix * s.size)
    return scale * (
        _box_adjoint(alpha, k) + y * _box_adjoint(beta, k) + x * _box_adjoint(gamma, k)
    )


def batch_loss(m_hat: np.ndarray, m: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Negative mean SSIM over a ``(N, H, W)`` batch."""
    if m_hat.shape != m.shape:
        raise ValueError(f"batch shapes differ: {m_hat.shape} vs {m.shape}")
    if m_hat.ndim != 3 or m_hat.shape[0] == 0:
        raise ValueError("batch_loss needs a non-empty (N, H, W) batch")
    return -float(np.mean([ssim(a, b, cfg) for a, b in zip(m_hat, m)]))


def batch_loss_grad(m_hat: np.ndarray, m: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    n = m_hat.shape[0]
    return np.stack([-ssim_grad(a, b, cfg) / n for a, b in zip(m_hat, m)])


def nmse(x_hat: np.ndarray, x: np.ndarray) -> float:
    denom = float(np.sum(np.abs(x) ** 2))
    if denom == 0:
        raise ValueError("NMSE undefined for an all-zero reference")
    return float(np.sum(np.abs(x_hat - x) ** 2)) / denom


def psnr(x_hat: np.ndarray, x: np.ndarray) -> float:
    """PSNR in dB with the peak taken from the reference; ``inf`` if identical."""
    mse = float(np.mean(np.abs(x_hat - x) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(float(np.max(x)) ** 2 / mse)

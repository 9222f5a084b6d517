"""Rate-distortion objective: MS-SSIM distortion plus a QP-driven lambda."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LAMBDA_K = 0.12
LAMBDA_B = -8.0
LAMBDA_MIN = 1e-8
LAMBDA_MAX = 1e-2
QP_EPS = 1e-12
QP_MAX = 50.0

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
CS_FLOOR = 1e-8


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LambdaMap:
    k: float = LAMBDA_K
    b: float = LAMBDA_B
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX

    def __call__(self, qp: float) -> float:
        return lambda_adapt(qp, self)


def lambda_adapt(qp: float, lmap: LambdaMap | None = None) -> float:
    """lambda = 10 ** (k * clamp(qp, eps, 50) + b), kept inside (lambda_min, lambda_max]."""
    lmap = lmap or LambdaMap()
    qp = min(QP_MAX, max(QP_EPS, float(qp)))
    lam = 10.0 ** (lmap.k * qp + lmap.b)
    return min(lmap.lambda_max, max(lam, math.nextafter(lmap.lambda_min, math.inf)))


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return (g / g.sum()).to(dtype)


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable valid-mode Gaussian, per channel
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.reshape(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.reshape(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_terms(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0):
    """Per-image (ssim, cs) means, each shaped N."""
    win = gaussian_window(dtype=a.dtype)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    var_a = _filter(a * a, win) - mu_a ** 2
    var_b = _filter(b * b, win) - mu_b ** 2
    cov = _filter(a * b, win) - mu_a * mu_b
    cs_map = (2 * cov + c2) / (var_a + var_b + c2)
    l_map = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return (l_map * cs_map).flatten(1).mean(1), cs_map.flatten(1).mean(1)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def scale_count(height: int, width: int, max_scales: int = 5) -> int:
    """Largest scale count with min side > (window - 1) * 2**(scales - 1)."""
    side = min(height, width)
    m = max_scales
    while m >= 1 and side <= (WINDOW_SIZE - 1) * 2 ** (m - 1):
        m -= 1
    if m < 1:
        raise ValueError(f"{height}x{width} is too small for an {WINDOW_SIZE}x{WINDOW_SIZE} SSIM window")
    return m


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean single-scale SSIM over the batch."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    scale_count(a.shape[-2], a.shape[-1], 1)
    return _ssim_terms(a, b, data_range)[0].mean()


def ms_ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0,
            weights: tuple[float, ...] = MS_SSIM_WEIGHTS, scales: int | None = None) -> torch.Tensor:
    """Mean MS-SSIM over the batch.

    Uses as many of the five scales as the image supports (see
    :func:`scale_count`); when fewer are used the leading weights are
    renormalized to sum to one.
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    m = scales or scale_count(a.shape[-2], a.shape[-1], len(weights))
    w = torch.tensor(weights[:m], dtype=a.dtype)
    w = w / w.sum()
    factors = []
    for j in range(m):
        s, cs = _ssim_terms(a, b, data_range)
        factors.append(cs if j < m - 1 else s)
        if j < m - 1:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
    stack = torch.stack(factors, dim=0).clamp_min(CS_FLOOR)
    return torch.prod(stack ** w[:, None], dim=0).mean()


@dataclass
class RdLossTerms:
    distortion: torch.Tensor
    rate: torch.Tensor  # bits per pixel
    lam: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"loss": float(self.total.detach()), "distortion": float(self.distortion.detach()),
                "rate_bpp": float(self.rate.detach()), "lambda": self.lam}


def rd_loss(x: torch.Tensor, recon: torch.Tensor, rate_bits: torch.Tensor, qp: float | None,
            pixel_count: int, *, lam: float | None = None, lmap: LambdaMap | None = None) -> RdLossTerms:
    """D + lambda * R with D = 1 - MS-SSIM(recon, x) and R in bits per pixel.

    ``lam`` overrides the QP-driven lambda (used when the dynamic trade-off is
    disabled).
    """
    if lam is None:
        lam = lambda_adapt(qp, lmap)
    d = 1.0 - ms_ssim(recon, x)
    r = rate_bits / float(pixel_count)
    total = d + lam * r
    if not (torch.isfinite(d) and torch.isfinite(r) and torch.isfinite(total)):
        raise NonFiniteLossError(f"non-finite loss: D={float(d.detach())}, R={float(r.detach())}, lambda={lam}")
    return RdLossTerms(d, r, lam, total)

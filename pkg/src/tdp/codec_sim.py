"""Differentiable codec simulator used during training.

A compact analysis/synthesis transform pair with a scalar quantizer whose
step size is set by the dynamic quantization level ``f_q``, and a learnable
factorized prior that turns the quantized latents into a bit estimate.

Step size follows the codec convention of doubling every 6 QP units:
``step = delta_scale * 2 ** ((f_q - 4) / 6)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import ShapeError

FQ_MIN = 1.0
FQ_MAX = 50.0
DEFAULT_DELTA_SCALE = 1.0 / 16.0
PROB_FLOOR = 2.0 ** -50


@dataclass(frozen=True)
class QuantLevel:
    f_q: float

    def __post_init__(self):
        if not FQ_MIN <= self.f_q <= FQ_MAX:
            raise ValueError(f"f_q {self.f_q} outside [{FQ_MIN}, {FQ_MAX}]")


def dynamic_quant_level(qp: float, lo: float = FQ_MIN, hi: float = FQ_MAX) -> QuantLevel:
    """f_q = clip(qp, 1, 50)."""
    qp = float(qp)
    if not math.isfinite(qp):
        raise ValueError(f"non-finite qp {qp}")
    return QuantLevel(min(hi, max(lo, qp)))


def step_size(f_q: float | QuantLevel, delta_scale: float = DEFAULT_DELTA_SCALE) -> float:
    if isinstance(f_q, QuantLevel):
        f_q = f_q.f_q
    return delta_scale * 2.0 ** ((float(f_q) - 4.0) / 6.0)


def quantize(latent: torch.Tensor, step: float, mode: str = "train",
             generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform-noise proxy in train mode, rounding to multiples of ``step`` in eval."""
    if mode == "train":
        noise = torch.rand(latent.shape, generator=generator, dtype=latent.dtype) - 0.5
        return latent + step * noise
    if mode == "eval":
        return torch.round(latent / step) * step
    raise ValueError(f"unknown quantization mode {mode!r}")


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF (monotone MLP on the scalar latent value).

    Each layer applies softplus-positive weights, a bias, and a tanh-gated
    nonlinearity whose gate magnitude stays below one, so the cumulative
    logit is non-decreasing in its input.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
        self.underflow_count = 0

    def logits_cumulative(self, v: torch.Tensor) -> torch.Tensor:
        """v: C x 1 x K values -> C x 1 x K cumulative logits."""
        logits = v
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cumulative(v))

    def likelihood(self, v: torch.Tensor, step: float) -> torch.Tensor:
        """P(bin of width ``step`` centered at v), v shaped N x C x H x W."""
        if v.dim() != 4 or v.shape[1] != self.channels:
            raise ShapeError(f"expected N x {self.channels} x H x W latents, got {tuple(v.shape)}")
        flat = v.permute(1, 0, 2, 3).reshape(self.channels, 1, -1)
        lower = self.logits_cumulative(flat - step / 2)
        upper = self.logits_cumulative(flat + step / 2)
        # evaluate in the tail where sigmoid is most accurate
        # (a zero sum must still pick a side, or both sigmoids cancel to 0)
        sign = torch.where(lower + upper > 0, -1.0, 1.0).to(lower.dtype).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        self.underflow_count += int((lik < PROB_FLOOR).sum())
        lik = torch.clamp(lik, min=PROB_FLOOR)
        n, c, h, w = v.shape
        return lik.reshape(c, n, h, w).permute(1, 0, 2, 3)


def rate_estimate(v: torch.Tensor, entropy_model: FactorizedPrior, step: float) -> torch.Tensor:
    """Total bits: sum of -log2 P(bin) over all quantized latents."""
    return -torch.log2(entropy_model.likelihood(v, step)).sum()


class SimulatorModel(nn.Module):
    """Two stride-2 conv layers down, two transposed convs up, factorized prior."""

    def __init__(self, channels: int = 32, latent_channels: int = 8,
                 delta_scale: float = DEFAULT_DELTA_SCALE):
        super().__init__()
        self.delta_scale = delta_scale
        self.analysis = nn.Sequential(
            nn.Conv2d(1, channels, 5, stride=2, padding=2),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, latent_channels, 5, stride=2, padding=2),
        )
        self.synthesis = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, channels, 5, stride=2, padding=2, output_padding=1),
            nn.LeakyReLU(0.1),
            nn.ConvTranspose2d(channels, 1, 5, stride=2, padding=2, output_padding=1),
        )
        # decoder starts at mid-gray so early reconstructions have positive mean
        with torch.no_grad():
            self.synthesis[-1].bias.fill_(0.5)
        self.entropy = FactorizedPrior(latent_channels)

    def forward(self, x, f_q, mode="train", generator=None):
        return simulate(self, x, f_q, mode, generator)


def simulate(model: SimulatorModel, x_pre: torch.Tensor, f_q: float | QuantLevel, mode: str = "train",
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction, rate in bits) of an N x 1 x H x W batch."""
    if x_pre.dim() != 4 or x_pre.shape[1] != 1:
        raise ShapeError(f"expected N x 1 x H x W input, got {tuple(x_pre.shape)}")
    h, w = x_pre.shape[2:]
    ph, pw = (-h) % 4, (-w) % 4
    x = F.pad(x_pre, (0, pw, 0, ph), mode="replicate") if ph or pw else x_pre
    step = step_size(f_q, model.delta_scale)
    y = model.analysis(x)
    y_hat = quantize(y, step, mode, generator)
    bits = rate_estimate(y_hat, model.entropy, step)
    recon = model.synthesis(y_hat)[..., :h, :w]
    return recon, bits


def sample_pmf(entropy_model: FactorizedPrior, channel: int, step: float,
               support: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Discrete bin centers and probabilities of one channel on a step grid."""
    centers = np.arange(-support, support + 1, dtype=np.float64) * step
    with torch.no_grad():
        v = torch.as_tensor(centers, dtype=entropy_model.matrices[0].dtype)
        edges = torch.cat([v - step / 2, v[-1:] + step / 2])
        c = entropy_model.cdf(edges.expand(entropy_model.channels, 1, -1))[channel, 0].double().numpy()
    pmf = np.diff(c)
    return centers, pmf / pmf.sum()

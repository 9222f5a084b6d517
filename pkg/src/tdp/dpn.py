"""Dynamic preprocessing network and the residual intensity rule.

The network predicts a tanh-bounded residual mask ``x_m`` from a luma patch;
the preprocessed frame is ``f_d * x_m + x``. Because ``|x_m| <= 1`` the
per-pixel change never exceeds ``f_d``, and ``f_d = 0`` is an exact identity.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .numerics import ShapeError
from .video_io import Clip, from_normalized_luma, to_normalized_luma

MIN_SIDE = 16


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(torch.relu(self.conv1(x)))


class DpnModel(nn.Module):
    """head conv -> 4 residual blocks -> tail conv -> tanh."""

    def __init__(self, channels: int = 32, blocks: int = 4, tail_init_scale: float = 0.1):
        super().__init__()
        self.head = nn.Conv2d(1, channels, 3, padding=1)
        self.blocks = nn.Sequential(*(ResidualBlock(channels) for _ in range(blocks)))
        self.tail = nn.Conv2d(channels, 1, 3, padding=1)
        with torch.no_grad():
            self.tail.weight.mul_(tail_init_scale)
            self.tail.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.tail(self.blocks(torch.relu(self.head(x)))))


def dpn_mask(model: DpnModel, x: torch.Tensor) -> torch.Tensor:
    """Residual mask x_m in [-1, 1], same shape as the N x 1 x H x W input."""
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected N x 1 x H x W luma, got {tuple(x.shape)}")
    if x.shape[2] < MIN_SIDE or x.shape[3] < MIN_SIDE:
        raise ShapeError(f"patch {tuple(x.shape[2:])} smaller than {MIN_SIDE}x{MIN_SIDE}")
    return model(x)


def apply_intensity(x: torch.Tensor, x_m: torch.Tensor, f_d) -> torch.Tensor:
    """P(x) = f_d * x_m + x, left unclamped for the training graph."""
    if x.shape != x_m.shape:
        raise ShapeError(f"mask shape {tuple(x_m.shape)} != input shape {tuple(x.shape)}")
    f_d = torch.as_tensor(f_d, dtype=x.dtype)
    if f_d.numel() != 1:
        raise ShapeError("f_d must be a scalar")
    return f_d.reshape(()) * x_m + x


@torch.no_grad()
def preprocess_frames(model: DpnModel, clip: Clip, f_d: float) -> Clip:
    """Replace each luma plane by clamp(P(x)) re-quantized to the clip's bit depth."""
    dtype = next(model.parameters()).dtype
    frames = []
    for frame in clip.frames:
        luma = to_normalized_luma(frame, clip.bit_depth)
        x = torch.from_numpy(luma).to(dtype)[None, None]
        p = apply_intensity(x, dpn_mask(model, x), f_d)
        y = from_normalized_luma(p[0, 0].to(torch.float64).numpy(), clip.bit_depth)
        frames.append(type(frame)(y, frame.u, frame.v))
    return clip.with_frames(frames)


def preprocess_clip(models, clip: Clip, probe=None, cfg=None, *, force_fd: float | None = None):
    """Inference-time DPI: features -> f_d -> P(x) per frame; chroma untouched.

    ``models`` is a :class:`tdp.bundle.TdpModels`. ``probe`` is an optional
    :class:`tdp.preanalysis.QpProbeResult`; without one the probe runs with the
    settings in ``cfg``. Returns ``(clip, f_d)``.
    """
    from .fen import fen_forward
    from .preanalysis import EncoderProbe, extract_features, probe_qp

    if force_fd is None and cfg is not None:
        force_fd = cfg.force_fd
    if force_fd is not None:
        f_d = float(force_fd)
    else:
        if probe is None:
            encoder = EncoderProbe(cfg.probe_encoder) if cfg is not None and cfg.probe_encoder else None
            kbps = cfg.probe_bitrate if cfg is not None else 1500
            probe = probe_qp(clip, kbps, encoder)
        feats = extract_features(clip, probe.clip_qp)
        with torch.no_grad():
            f_d = float(fen_forward(models.fen, feats, models.normalizer))
    if not 0.0 <= f_d <= 1.0 or not np.isfinite(f_d):
        raise ValueError(f"f_d must lie in [0, 1], got {f_d}")
    return preprocess_frames(models.dpn, clip, f_d), f_d

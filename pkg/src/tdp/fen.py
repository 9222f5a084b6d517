"""Feature extraction network: 7 pre-analysis features -> intensity factor f_d."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .preanalysis import FEATURE_NAMES, FeatureVector

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class Normalizer:
    """Per-component affine standardization fitted on training features."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.array(self.mean)) / np.array(self.std)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * np.array(self.std) + np.array(self.mean)

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "features": list(FEATURE_NAMES),
                           "mean": list(self.mean), "std": list(self.std)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Normalizer":
        d = json.loads(text)
        if list(d.get("features", FEATURE_NAMES)) != list(FEATURE_NAMES):
            raise ValueError(f"normalizer feature order {d['features']} does not match {FEATURE_NAMES}")
        return cls(tuple(d["mean"]), tuple(d["std"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Normalizer":
        return cls.from_json(Path(path).read_text())

    @classmethod
    def identity(cls, width: int = 7) -> "Normalizer":
        return cls((0.0,) * width, (1.0,) * width)


def fit_normalizer(feature_set: Sequence[FeatureVector | Sequence[float]]) -> Normalizer:
    if len(feature_set) < 2:
        raise ValueError(f"need at least 2 feature vectors to fit a normalizer, got {len(feature_set)}")
    rows = np.stack([f.as_array() if isinstance(f, FeatureVector) else np.asarray(f, float)
                     for f in feature_set])
    std = np.maximum(rows.std(axis=0), STD_FLOOR)
    return Normalizer(tuple(rows.mean(axis=0).tolist()), tuple(std.tolist()))


class FenModel(nn.Module):
    """Two-layer MLP: Linear(7, hidden) -> ReLU -> Linear(hidden, 1) -> sigmoid."""

    def __init__(self, hidden: int = 16, in_features: int = 7):
        super().__init__()
        self.layer1 = nn.Linear(in_features, hidden)
        self.layer2 = nn.Linear(hidden, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.layer2(torch.relu(self.layer1(z)))).squeeze(-1)


def fen_forward(model: FenModel, features: FeatureVector | Sequence[float],
                normalizer: Normalizer) -> torch.Tensor:
    """Scalar f_d in (0, 1), differentiable w.r.t. the model parameters."""
    raw = features.as_array() if isinstance(features, FeatureVector) else np.asarray(features, float)
    if not all(math.isfinite(v) for v in raw):
        raise ValueError(f"non-finite feature vector {raw}")
    dtype = model.layer1.weight.dtype
    z = torch.as_tensor(normalizer.normalize(raw), dtype=dtype)
    return model(z)

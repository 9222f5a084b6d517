"""Experiment configuration.

Config files are JSON objects whose keys are :class:`TdpConfig` field names
(plus an optional ``schema_version``). Unknown keys are rejected. Command
line overrides (``key=value``) are applied on top of the file.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TdpConfig:
    # DPI / DQL / DlamT toggles and their fallbacks when off
    enable_dpi: bool = True
    enable_dql: bool = True
    enable_dlamt: bool = True
    fixed_f_d: float = 1.0
    fixed_f_q: float = 30.0
    fixed_lambda: float = 1e-4

    # lambda map and quantizer constants
    lambda_k: float = 0.12
    lambda_b: float = -8.0
    lambda_min: float = 1e-8
    lambda_max: float = 1e-2
    fq_min: float = 1.0
    fq_max: float = 50.0
    delta_scale: float = 1.0 / 16.0

    # architecture
    fen_hidden: int = 16
    dpn_channels: int = 32
    dpn_blocks: int = 4
    sim_channels: int = 32
    sim_latent: int = 8
    freeze_simulator: bool = False
    # staged schedule: the first sim_warmup_steps steps fit only the simulator
    # (at sim_warmup_lr), after which it is frozen and FEN/DPN are trained
    sim_warmup_steps: int = 0
    sim_warmup_lr: float | None = None

    # optimization
    lr: float = 1e-4
    steps: int = 1000
    seed: int = 0
    patch_size: int = 128
    samples_per_clip: int = 8
    checkpoint_every: int = 100
    grad_accum: int = 1

    # pre-analysis probe
    probe_bitrate: float = 1500.0
    probe_encoder: str | None = "x264"
    probe_fallback: bool = True
    probe_cache: str | None = None

    # evaluation
    bitrates: tuple[float, ...] = (1000.0, 2500.0, 4000.0, 5000.0)
    force_fd: float | None = None
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "bitrates", tuple(float(b) for b in self.bitrates))
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(msg)

        for name in ("fixed_f_d", "fixed_f_q", "fixed_lambda", "lr", "delta_scale", "lambda_k", "lambda_b"):
            if not math.isfinite(getattr(self, name)):
                bad(f"{name} must be finite")
        if not 0.0 <= self.fixed_f_d <= 1.0:
            bad(f"fixed_f_d must lie in [0, 1], got {self.fixed_f_d}")
        if not self.fq_min <= self.fixed_f_q <= self.fq_max:
            bad(f"fixed_f_q must lie in [{self.fq_min}, {self.fq_max}], got {self.fixed_f_q}")
        if not self.lambda_min < self.fixed_lambda <= self.lambda_max:
            bad(f"fixed_lambda must lie in ({self.lambda_min}, {self.lambda_max}], got {self.fixed_lambda}")
        if self.force_fd is not None and not 0.0 <= self.force_fd <= 1.0:
            bad(f"force_fd must lie in [0, 1], got {self.force_fd}")
        if self.lr <= 0 or self.delta_scale <= 0:
            bad("lr and delta_scale must be positive")
        if self.steps < 0 or self.samples_per_clip < 1 or self.grad_accum < 1 or self.jobs < 1:
            bad("steps >= 0, samples_per_clip >= 1, grad_accum >= 1 and jobs >= 1 required")
        if self.patch_size < 16:
            bad(f"patch_size must be at least 16, got {self.patch_size}")
        if self.sim_warmup_steps < 0:
            bad("sim_warmup_steps must be non-negative")
        if self.sim_warmup_lr is not None and not (math.isfinite(self.sim_warmup_lr) and self.sim_warmup_lr > 0):
            bad("sim_warmup_lr must be positive")
        if self.checkpoint_every < 1:
            bad("checkpoint_every must be positive")
        if not self.bitrates or any(b <= 0 for b in self.bitrates):
            bad("bitrates must be a nonempty list of positive kbps values")

    def replace(self, **changes) -> "TdpConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bitrates"] = list(self.bitrates)
        return {"schema_version": CONFIG_SCHEMA_VERSION, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TdpConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**{k: _coerce(k, v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "TdpConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def with_overrides(self, pairs: Iterable[str]) -> "TdpConfig":
        """Apply ``key=value`` strings; values are parsed as JSON when possible."""
        d = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            key = key.strip().replace("-", "_")
            try:
                val: Any = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            d[key] = val
        return TdpConfig.from_dict(d)


_TYPES = {f.name: f.type for f in dataclasses.fields(TdpConfig)}


def _coerce(key: str, value):
    t = str(_TYPES[key])
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if t == "int":
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if t == "float":
        if isinstance(value, bool):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if t.startswith("tuple"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(float(v) for v in value)
    if t == "float | None":
        return None if value is None else float(value)
    return value

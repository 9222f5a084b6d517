"""Content pre-analysis: SI/TI statistics and an encoder QP probe.

SI and TI follow the ITU-T P.910 definitions, computed on luma normalized to
[0, 1]. SI excludes the one-pixel Sobel border.

The QP probe runs an external encoder in CBR mode and parses per-frame QP
from its log. When no encoder is available a deterministic fallback maps
(si_avg, ti_avg) onto [10, 45] (see :func:`fallback_qp`).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import shutil
import subprocess
import tempfile
import warnings
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .video_io import Clip, to_normalized_luma, write_y4m

log = logging.getLogger(__name__)

DEFAULT_PROBE_KBPS = 1500

FEATURE_NAMES = ("si_max", "si_avg", "si_std", "ti_max", "ti_avg", "ti_std", "qp")

FALLBACK_VERSION = "fallback-v1"
FALLBACK_QP_MIN = 10.0
FALLBACK_QP_MAX = 45.0
FALLBACK_SCALE = 0.1

# x264 --verbose per-frame line: "x264 [debug]: frame=   3 QP=24.17 NAL=2 Slice:P ..."
# x265 --csv-log-level / verbose lines use the same "frame=... QP=..." shape often enough;
# anything that does not match is ignored.
QP_LINE_RE = re.compile(r"frame=\s*(\d+)\s+QP=\s*([0-9]+(?:\.[0-9]+)?)")


class ProbeError(RuntimeError):
    pass


class SingleFrameWarning(UserWarning):
    """Clip had one frame; TI statistics were set to 0."""


@dataclass(frozen=True)
class FeatureVector:
    si_max: float
    si_avg: float
    si_std: float
    ti_max: float
    ti_avg: float
    ti_std: float
    qp: float

    def __post_init__(self):
        vals = astuple(self)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite feature in {vals}")
        if self.si_std < 0 or self.ti_std < 0 or self.qp < 0:
            raise ValueError("negative std or qp")
        if self.si_max < self.si_avg - 1e-12 or self.ti_max < self.ti_avg - 1e-12:
            raise ValueError("max below average")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def to_dict(self) -> dict:
        return dict(zip(FEATURE_NAMES, astuple(self)))

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "FeatureVector":
        if len(values) != 7:
            raise ValueError(f"expected 7 features, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class QpProbeResult:
    per_frame_qp: tuple[float, ...]
    clip_qp: float
    source: str  # encoder name or FALLBACK_VERSION
    bitrate_kbps: float = DEFAULT_PROBE_KBPS


# --- SI / TI -------------------------------------------------------------

def sobel_magnitude(luma: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude; the one-pixel border is left at 0."""
    p = np.asarray(luma, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 3 or p.shape[1] < 3:
        raise ValueError(f"Sobel needs a 2-D plane of at least 3x3, got {p.shape}")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    out = np.zeros_like(p)
    out[1:-1, 1:-1] = np.hypot(gx, gy)
    return out


def spatial_information(luma: np.ndarray) -> float:
    return float(sobel_magnitude(luma)[1:-1, 1:-1].std())


def temporal_information(curr: np.ndarray, prev: np.ndarray) -> float:
    curr = np.asarray(curr, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    if curr.shape != prev.shape:
        raise ValueError(f"frame shapes differ: {curr.shape} vs {prev.shape}")
    return float((curr - prev).std())


def si_ti_series(lumas: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    si = np.array([spatial_information(y) for y in lumas])
    ti = np.array([temporal_information(lumas[i], lumas[i - 1]) for i in range(1, len(lumas))])
    return si, ti


def clip_lumas(clip: Clip) -> list[np.ndarray]:
    return [to_normalized_luma(f, clip.bit_depth) for f in clip.frames]


def features_from_lumas(lumas: Sequence[np.ndarray], qp: float) -> FeatureVector:
    if not lumas:
        raise ValueError("no frames to analyze")
    si, ti = si_ti_series(lumas)
    if len(ti) == 0:
        warnings.warn("single-frame clip: TI statistics set to 0", SingleFrameWarning, stacklevel=3)
        ti = np.zeros(1)
    return FeatureVector(float(si.max()), float(si.mean()), float(si.std()),
                         float(ti.max()), float(ti.mean()), float(ti.std()), float(qp))


def extract_features(clip: Clip, qp: float) -> FeatureVector:
    """(si_max, si_avg, si_std, ti_max, ti_avg, ti_std, qp) for ``clip``."""
    return features_from_lumas(clip_lumas(clip), qp)


# --- QP probe ------------------------------------------------------------

def fallback_qp(si_avg: float, ti_avg: float) -> float:
    """Monotone complexity -> QP map used when no encoder is available.

    ``qp = 10 + 35 * (1 - exp(-(si_avg + ti_avg) / 0.1))``. A flat static clip
    maps to exactly 10; very busy content saturates toward 45.
    """
    s = max(0.0, si_avg) + max(0.0, ti_avg)
    return FALLBACK_QP_MIN + (FALLBACK_QP_MAX - FALLBACK_QP_MIN) * (1.0 - math.exp(-s / FALLBACK_SCALE))


def parse_qp_log(text: str) -> list[float]:
    """Per-frame QPs in frame order from an encoder log."""
    found = {}
    for m in QP_LINE_RE.finditer(text):
        found[int(m.group(1))] = float(m.group(2))
    return [found[k] for k in sorted(found)]


@dataclass
class EncoderProbe:
    """External CBR encoder used for the QP probe.

    ``args`` is a template; ``{input}``, ``{output}`` and ``{bitrate}`` are
    substituted. The default is x264 with the fast preset.
    """

    binary: str = "x264"
    args: tuple[str, ...] = (
        "--preset", "fast", "--bitrate", "{bitrate}", "--vbv-maxrate", "{bitrate}",
        "--vbv-bufsize", "{bitrate}", "--verbose", "-o", "{output}", "{input}",
    )
    timeout: float = 600.0

    def available(self) -> bool:
        return shutil.which(self.binary) is not None or os.path.isfile(self.binary)

    def run(self, clip: Clip, bitrate_kbps: float) -> list[float]:
        with tempfile.TemporaryDirectory(prefix="tdp-probe-") as tmp:
            src = Path(tmp) / "probe.y4m"
            write_y4m(clip, src)
            subs = {"input": str(src), "output": os.devnull, "bitrate": f"{bitrate_kbps:g}"}
            cmd = [self.binary] + [a.format(**subs) for a in self.args]
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ProbeError(f"encoder probe failed to run: {' '.join(cmd)}: {exc}") from exc
        if proc.returncode != 0:
            raise ProbeError(f"encoder probe exited {proc.returncode}: {' '.join(cmd)}\n{proc.stderr[-2000:]}")
        qps = parse_qp_log(proc.stderr + proc.stdout)
        if not qps:
            raise ProbeError(f"no per-frame QP lines in encoder output of {' '.join(cmd)}")
        return qps


def clip_hash(clip: Clip) -> str:
    h = hashlib.sha256()
    h.update(f"{clip.width}x{clip.height}:{clip.bit_depth}:{clip.chroma}:{clip.frame_rate}".encode())
    for f in clip.frames:
        for p in f.planes:
            h.update(p.tobytes())
    return h.hexdigest()


def probe_qp(clip: Clip, target_bitrate: float = DEFAULT_PROBE_KBPS,
             encoder: EncoderProbe | None = None, *, fallback: bool = True,
             cache_dir: str | os.PathLike | None = None) -> QpProbeResult:
    """Clip-level QP at ``target_bitrate`` kbps: mean of the per-frame QPs.

    Results are cached as JSON sidecars named by (clip hash, bitrate) when
    ``cache_dir`` is given.
    """
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"{clip_hash(clip)[:32]}_{target_bitrate:g}.json"
        if cache_path.exists():
            d = json.loads(cache_path.read_text())
            return QpProbeResult(tuple(d["per_frame_qp"]), d["clip_qp"], d["source"], d["bitrate_kbps"])

    if encoder is not None and encoder.available():
        qps = encoder.run(clip, target_bitrate)
        result = QpProbeResult(tuple(qps), float(np.mean(qps)), Path(encoder.binary).name, target_bitrate)
    elif fallback:
        if encoder is not None:
            log.info("encoder %s not found, using %s", encoder.binary, FALLBACK_VERSION)
        si, ti = si_ti_series(clip_lumas(clip))
        ti_avg = float(ti.mean()) if len(ti) else 0.0
        qp = fallback_qp(float(si.mean()), ti_avg)
        result = QpProbeResult((qp,) * len(clip), qp, FALLBACK_VERSION, target_bitrate)
    else:
        name = encoder.binary if encoder is not None else "<none>"
        raise ProbeError(f"encoder {name} unavailable and fallback disabled")

    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps({
            "schema_version": 1,
            "per_frame_qp": list(result.per_frame_qp),
            "clip_qp": result.clip_qp,
            "source": result.source,
            "bitrate_kbps": result.bitrate_kbps,
        }))
    return result


def analyze_clip(clip: Clip, target_bitrate: float = DEFAULT_PROBE_KBPS,
                 encoder: EncoderProbe | None = None, **probe_kw) -> tuple[FeatureVector, QpProbeResult]:
    probe = probe_qp(clip, target_bitrate, encoder, **probe_kw)
    return extract_features(clip, probe.clip_qp), probe

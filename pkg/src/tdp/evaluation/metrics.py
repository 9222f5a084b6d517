"""Full-reference quality metrics on decoded clips.

MS-SSIM, SSIM and PSNR are computed internally on luma (float64, the same
code path as the training loss). VMAF and VMAF_NEG come from an external
libvmaf ``vmaf`` binary whose JSON report is parsed.
"""

from __future__ import annotations

import json
import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import loss
from ..video_io import Clip, to_normalized_luma, write_y4m

INTERNAL_METRICS = ("ms-ssim", "ssim", "psnr")
VMAF_METRICS = {"vmaf": "vmaf_v0.6.1", "vmaf_neg": "vmaf_v0.6.1neg"}
PSNR_CAP_DB = 100.0


class MetricError(RuntimeError):
    pass


def _luma_batch(clip: Clip) -> torch.Tensor:
    return torch.from_numpy(np.stack([to_normalized_luma(f, clip.bit_depth) for f in clip.frames]))[:, None]


def _check_pair(ref: Clip, dist: Clip) -> None:
    if (ref.width, ref.height, len(ref)) != (dist.width, dist.height, len(dist)):
        raise MetricError(f"reference {ref.width}x{ref.height}x{len(ref)} and distorted "
                          f"{dist.width}x{dist.height}x{len(dist)} differ in geometry or length")


def clip_ms_ssim(ref: Clip, dist: Clip) -> float:
    """Mean per-frame luma MS-SSIM."""
    _check_pair(ref, dist)
    with torch.no_grad():
        return float(loss.ms_ssim(_luma_batch(dist), _luma_batch(ref)))


def clip_ssim(ref: Clip, dist: Clip) -> float:
    _check_pair(ref, dist)
    with torch.no_grad():
        return float(loss.ssim(_luma_batch(dist), _luma_batch(ref)))


def clip_psnr(ref: Clip, dist: Clip) -> float:
    """Mean per-frame luma PSNR in dB, each frame capped at 100 dB."""
    _check_pair(ref, dist)
    vals = []
    for a, b in zip(ref.frames, dist.frames):
        mse = float(np.mean((a.y.astype(np.float64) - b.y.astype(np.float64)) ** 2))
        vals.append(PSNR_CAP_DB if mse == 0 else min(PSNR_CAP_DB, 10 * math.log10(ref.peak ** 2 / mse)))
    return float(np.mean(vals))


def parse_vmaf_json(text: str, key: str = "vmaf") -> float:
    """Pooled mean score from a libvmaf JSON report.

    Uses ``pooled_metrics[key].mean`` when present, else the mean of the
    per-frame values.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MetricError(f"unparseable VMAF report: {exc}") from exc
    pooled = data.get("pooled_metrics", {}).get(key)
    if isinstance(pooled, dict) and "mean" in pooled:
        return float(pooled["mean"])
    frames = [f.get("metrics", {}).get(key) for f in data.get("frames", [])]
    frames = [v for v in frames if v is not None]
    if not frames:
        raise MetricError(f"VMAF report has no {key!r} scores")
    return float(np.mean(frames))


@dataclass
class VmafTool:
    binary: str = "vmaf"
    timeout: float = 3600.0

    def available(self) -> bool:
        return shutil.which(self.binary) is not None

    def version(self) -> str:
        try:
            out = subprocess.run([self.binary, "--version"], capture_output=True, text=True, timeout=30)
        except OSError:
            return "unavailable"
        return (out.stdout or out.stderr).strip().splitlines()[0] if (out.stdout or out.stderr) else "unknown"

    def score(self, ref_path: Path, dist_path: Path, metric: str) -> float:
        model = VMAF_METRICS[metric]
        with tempfile.TemporaryDirectory(prefix="tdp-vmaf-") as tmp:
            out = Path(tmp) / "vmaf.json"
            cmd = [self.binary, "-r", str(ref_path), "-d", str(dist_path), "--json", "-o", str(out),
                   "--model", f"version={model}:name={metric}"]
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise MetricError(f"{' '.join(cmd)}: {exc}") from exc
            if proc.returncode != 0:
                raise MetricError(f"{' '.join(cmd)} exited {proc.returncode}: {proc.stderr[-2000:]}")
            return parse_vmaf_json(out.read_text(), metric)


def measure(ref: Clip, dist: Clip, metrics, *, ref_path: Path | None = None, dist_path: Path | None = None,
            vmaf: VmafTool | None = None) -> dict[str, float]:
    """Score ``dist`` against ``ref`` for each requested metric name."""
    out = {}
    for m in metrics:
        if m == "ms-ssim":
            out[m] = clip_ms_ssim(ref, dist)
        elif m == "ssim":
            out[m] = clip_ssim(ref, dist)
        elif m == "psnr":
            out[m] = clip_psnr(ref, dist)
        elif m in VMAF_METRICS:
            tool = vmaf or VmafTool()
            if not tool.available():
                raise MetricError(f"{m} needs the '{tool.binary}' binary, which was not found")
            with tempfile.TemporaryDirectory(prefix="tdp-metric-") as tmp:
                rp = ref_path or Path(tmp) / "ref.y4m"
                dp = dist_path or Path(tmp) / "dist.y4m"
                if ref_path is None:
                    write_y4m(ref, rp)
                if dist_path is None:
                    write_y4m(dist, dp)
                out[m] = tool.score(rp, dp, m)
        else:
            raise MetricError(f"unknown metric {m!r}; choose from {INTERNAL_METRICS + tuple(VMAF_METRICS)}")
    return out

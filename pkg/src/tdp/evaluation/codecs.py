"""Codec profiles and the bitrate-ladder runner.

A profile is a pair of argument templates (encode, decode). Templates may use
``{input}``, ``{output}``, ``{decoded}``, ``{bitrate}`` (kbps),
``{bitrate_bps}``, ``{fps}``, ``{width}``, ``{height}`` and ``{python}``.
Bitrate is measured from the encoded file size and the clip duration, and
quality is always scored against the original (unpreprocessed) source.
"""

from __future__ import annotations

import logging
import shutil
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..video_io import Clip, read_y4m, write_y4m
from .metrics import VmafTool, measure
from .rd import RdPoint

log = logging.getLogger(__name__)

DEFAULT_BITRATES = (1000.0, 2500.0, 4000.0, 5000.0)


class CodecError(RuntimeError):
    """An external codec invocation failed."""

    def __init__(self, message: str, command: Sequence[str] = (), returncode: int | None = None,
                 stderr: str = ""):
        super().__init__(f"{message}: {' '.join(command)} (exit {returncode})\n{stderr[-2000:]}".rstrip())
        self.command = list(command)
        self.returncode = returncode
        self.stderr = stderr


@dataclass(frozen=True)
class CodecProfile:
    name: str
    encode: tuple[str, ...]
    decode: tuple[str, ...]
    extension: str
    version_cmd: tuple[str, ...] = ()

    def _subs(self, **kw) -> dict:
        return {"python": sys.executable, **kw}

    def encode_cmd(self, **kw) -> list[str]:
        subs = self._subs(**kw)
        return [a.format(**subs) for a in self.encode]

    def decode_cmd(self, **kw) -> list[str]:
        subs = self._subs(**kw)
        return [a.format(**subs) for a in self.decode]

    def available(self) -> bool:
        binaries = {self.encode[0], self.decode[0]} - {"{python}"}
        return all(shutil.which(b) for b in binaries)

    def version(self) -> str:
        if not self.version_cmd:
            return "unknown"
        cmd = [a.format(**self._subs()) for a in self.version_cmd]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=30)
        except (OSError, subprocess.TimeoutExpired):
            return "unavailable"
        text = (proc.stdout or proc.stderr).strip()
        return text.splitlines()[0] if text else "unknown"


_Y4M_DECODE = ("ffmpeg", "-y", "-loglevel", "error", "-i", "{output}", "-strict", "-1", "-f", "yuv4mpegpipe",
               "{decoded}")
_CBR_X26X = ("--preset", "medium", "--bitrate", "{bitrate}", "--vbv-maxrate", "{bitrate}",
             "--vbv-bufsize", "{bitrate}")
_STUB = ("{python}", "-m", "tdp.evaluation.stub")

PROFILES = {
    "x264": CodecProfile("x264", ("x264",) + _CBR_X26X + ("--nal-hrd", "cbr", "-o", "{output}", "{input}"),
                         _Y4M_DECODE, ".264", ("x264", "--version")),
    "x265": CodecProfile("x265", ("x265",) + _CBR_X26X + ("--input", "{input}", "-o", "{output}"),
                         _Y4M_DECODE, ".265", ("x265", "--version")),
    "vvenc": CodecProfile("vvenc", ("vvencapp", "--preset", "medium", "-b", "{bitrate_bps}", "-i", "{input}",
                                    "-o", "{output}"),
                          ("vvdecapp", "-b", "{output}", "-o", "{decoded}", "--y4m"), ".266",
                          ("vvencapp", "--version")),
    "stub-lossless": CodecProfile("stub-lossless", _STUB + ("encode", "--mode", "lossless", "--bitrate",
                                                            "{bitrate}", "{input}", "{output}"),
                                  _STUB + ("decode", "{output}", "{decoded}"), ".y4m", _STUB + ("version",)),
    "stub-noisy": CodecProfile("stub-noisy", _STUB + ("encode", "--mode", "noisy", "--bitrate", "{bitrate}",
                                                      "{input}", "{output}"),
                               _STUB + ("decode", "{output}", "{decoded}"), ".stub", _STUB + ("version",)),
}


def get_profile(name: str) -> CodecProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown codec profile {name!r}; choose from {sorted(PROFILES)}") from None


def _run(cmd: list[str], what: str, timeout: float) -> None:
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise CodecError(f"{what} could not run ({exc})", cmd) from exc
    if proc.returncode != 0:
        raise CodecError(f"{what} failed", cmd, proc.returncode, proc.stderr)


def encode_and_measure(clip: Clip, profile: CodecProfile, target_kbps: float, *, reference: Clip | None = None,
                       metrics: Sequence[str] = ("ms-ssim",), workdir: str | Path | None = None,
                       timeout: float = 3600.0, vmaf: VmafTool | None = None) -> list[RdPoint]:
    """Encode ``clip`` at ``target_kbps``, decode, and score against ``reference``.

    ``reference`` defaults to ``clip`` itself (the anchor case). Returns one
    point per metric, all sharing the measured bitrate.
    """
    reference = reference if reference is not None else clip
    if target_kbps <= 0:
        raise ValueError(f"target bitrate must be positive, got {target_kbps}")
    with tempfile.TemporaryDirectory(prefix="tdp-enc-", dir=workdir) as tmp:
        tmp = Path(tmp)
        src, enc, dec = tmp / "input.y4m", tmp / f"stream{profile.extension}", tmp / "decoded.y4m"
        write_y4m(clip, src)
        subs = dict(input=str(src), output=str(enc), decoded=str(dec), bitrate=f"{target_kbps:g}",
                    bitrate_bps=str(int(round(target_kbps * 1000))), fps=f"{float(clip.frame_rate):g}",
                    width=clip.width, height=clip.height)
        _run(profile.encode_cmd(**subs), f"{profile.name} encode", timeout)
        _run(profile.decode_cmd(**subs), f"{profile.name} decode", timeout)
        size_bits = enc.stat().st_size * 8
        decoded = read_y4m(dec)
        ref_path = None
        if reference is clip:
            ref_path = src
        scores = measure(reference, decoded, metrics, ref_path=ref_path, dist_path=dec, vmaf=vmaf)
    kbps = size_bits / clip.duration / 1000.0
    return [RdPoint(kbps, scores[m], m, float(target_kbps)) for m in metrics]


@dataclass
class LadderJob:
    clip_id: str
    clip: Clip
    reference: Clip | None = None


@dataclass
class LadderResult:
    rows: list[dict]
    failures: list[tuple[str, float, str]] = field(default_factory=list)


def run_ladder(jobs: Sequence[LadderJob], profile: CodecProfile, bitrates: Sequence[float] = DEFAULT_BITRATES,
               metrics: Sequence[str] = ("ms-ssim",), *, workers: int = 1, keep_going: bool = False,
               workdir: str | Path | None = None) -> LadderResult:
    """Every (clip, bitrate) pair through ``profile`` on a bounded thread pool.

    Rows come back sorted by (clip, target bitrate, metric) whatever the
    completion order. Without ``keep_going`` the first failure is raised.
    """
    version = profile.version()
    tasks = [(job, float(b)) for job in jobs for b in bitrates]

    def one(task):
        job, b = task
        try:
            return task, encode_and_measure(job.clip, profile, b, reference=job.reference, metrics=metrics,
                                            workdir=workdir), None
        except Exception as exc:  # noqa: BLE001 - collected and re-raised below
            return task, None, exc

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, tasks))

    rows, failures = [], []
    for (job, b), points, exc in results:
        if exc is not None:
            if not keep_going:
                raise exc
            log.error("%s @ %g kbps: %s", job.clip_id, b, exc)
            failures.append((job.clip_id, b, str(exc)))
            continue
        for p in points:
            rows.append({"clip": job.clip_id, "codec": profile.name, "target_kbps": b, "bitrate_kbps": p.bitrate,
                         "metric": p.metric, "score": p.quality, "tool_version": version})
    rows.sort(key=lambda r: (r["clip"], r["target_kbps"], r["metric"]))
    return LadderResult(rows, failures)

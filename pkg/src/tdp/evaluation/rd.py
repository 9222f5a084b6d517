"""Rate-distortion bookkeeping: RD curves, BD-rate, bad cases, heat-maps."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

RESULTS_SCHEMA_VERSION = 1
RESULT_FIELDS = ("schema_version", "clip", "codec", "target_kbps", "bitrate_kbps", "metric", "score",
                 "tool_version")


class MonotoneViolationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RdPoint:
    bitrate: float  # measured kbps
    quality: float
    metric: str = "ms-ssim"
    target: float | None = None

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValueError(f"bitrate must be positive, got {self.bitrate}")
        if not math.isfinite(self.quality):
            raise ValueError(f"quality must be finite, got {self.quality}")


@dataclass
class RdCurve:
    points: list[RdPoint]
    codec: str = ""
    clip: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bitrate)
        metrics = {p.metric for p in self.points}
        if len(metrics) > 1:
            raise ValueError(f"curve mixes metrics {sorted(metrics)}")

    @property
    def metric(self) -> str:
        return self.points[0].metric if self.points else ""

    def rates(self) -> np.ndarray:
        return np.array([p.bitrate for p in self.points], dtype=np.float64)

    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points], dtype=np.float64)

    def problems(self) -> list[str]:
        """Reasons the curve falls short of a well-formed BD-rate input."""
        out = []
        if len(self.points) < 4:
            out.append(f"{len(self.points)} points, want at least 4")
        r = self.rates()
        if np.any(np.diff(r) <= 0):
            out.append("bitrates not strictly increasing")
        return out

    @classmethod
    def from_arrays(cls, rates: Sequence[float], qualities: Sequence[float], metric: str = "ms-ssim",
                    **kw) -> "RdCurve":
        return cls([RdPoint(float(r), float(q), metric) for r, q in zip(rates, qualities)], **kw)


@dataclass(frozen=True)
class BdbrResult:
    value: float  # percent; nan when invalid
    overlap_span: tuple[float, float]
    valid: bool = True
    notes: tuple[str, ...] = field(default=())


def _log_rate_by_quality(curve: RdCurve) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Quality-sorted (quality, log10 rate) with duplicate qualities averaged."""
    notes = []
    q, lr = curve.qualities(), np.log10(curve.rates())
    if len(q) == 0:
        raise ValueError("empty RD curve")
    if np.any(np.diff(q) < 0):
        notes.append(f"{curve.clip or 'curve'}: quality not monotone in bitrate")
        warnings.warn(notes[-1], MonotoneViolationWarning, stacklevel=3)
    uq, inv = np.unique(q, return_inverse=True)
    sums = np.zeros(len(uq))
    np.add.at(sums, inv, lr)
    counts = np.bincount(inv, minlength=len(uq))
    if len(uq) < len(q):
        notes.append(f"{curve.clip or 'curve'}: {len(q) - len(uq)} duplicate quality values averaged")
    return uq, sums / counts, notes


def _integral(q: np.ndarray, lr: np.ndarray, lo: float, hi: float) -> float:
    if len(q) == 1:
        return lr[0] * (hi - lo)
    return float(PchipInterpolator(q, lr, extrapolate=False).integrate(lo, hi))


def _value_at(q: np.ndarray, lr: np.ndarray, at: float) -> float:
    if len(q) == 1:
        return float(lr[0])
    return float(PchipInterpolator(q, lr)(at))


def bdbr(anchor: RdCurve, test: RdCurve) -> BdbrResult:
    """Bjontegaard delta rate of ``test`` against ``anchor`` in percent.

    log10(rate) is interpolated as a function of quality with a monotone
    piecewise-cubic Hermite (PCHIP) fit and integrated exactly over the
    common quality range. Negative means ``test`` needs fewer bits.

    If both curves meet the common range in a single quality value (e.g.
    lossless runs where every point has the same quality) the average over
    that degenerate span is the log-rate difference at that point.
    """
    if anchor.metric and test.metric and anchor.metric != test.metric:
        raise ValueError(f"metric mismatch: {anchor.metric} vs {test.metric}")
    qa, la, notes_a = _log_rate_by_quality(anchor)
    qt, lt, notes_t = _log_rate_by_quality(test)
    notes = tuple(notes_a + notes_t)
    lo, hi = max(qa[0], qt[0]), min(qa[-1], qt[-1])
    if lo > hi:
        return BdbrResult(float("nan"), (lo, hi), False, notes + ("no quality overlap",))
    if lo == hi:
        diff = _value_at(qt, lt, lo) - _value_at(qa, la, lo)
        return BdbrResult((10.0 ** diff - 1.0) * 100.0, (lo, hi), True, notes + ("degenerate overlap",))
    avg = (_integral(qt, lt, lo, hi) - _integral(qa, la, lo, hi)) / (hi - lo)
    return BdbrResult((10.0 ** avg - 1.0) * 100.0, (lo, hi), True, notes)


def bad_case_rate(values: Iterable[float | BdbrResult]) -> float:
    """Fraction of BD-rates above zero; invalid results are ignored."""
    vals = []
    for v in values:
        if isinstance(v, BdbrResult):
            if not v.valid:
                continue
            v = v.value
        vals.append(float(v))
    if not vals:
        raise ValueError("bad_case_rate needs at least one valid BD-rate")
    return sum(v > 0 for v in vals) / len(vals)


# --- complexity and heat-map --------------------------------------------------

def complexity_score(si_avg: float, ti_avg: float) -> float:
    """Spatio-temporal complexity proxy before normalization: sqrt(si_avg * ti_avg)."""
    return math.sqrt(max(si_avg, 0.0) * max(ti_avg, 0.0))


def normalize_scores(scores: Sequence[float]) -> list[float]:
    """Min-max normalize onto [0, 1]; a degenerate set maps to 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return []
    lo, hi = s.min(), s.max()
    if hi == lo:
        return [0.5] * len(s)
    return list(((s - lo) / (hi - lo)).clip(0.0, 1.0))


def normalized_complexity(features: Sequence) -> list[float]:
    """Normalized complexity of every clip in an evaluation set.

    ``features`` holds :class:`tdp.preanalysis.FeatureVector` objects (or
    anything with ``si_avg`` and ``ti_avg``). This is a proxy, not the
    coding-complexity measure shipped with the YouTube-UGC dataset.
    """
    return normalize_scores([complexity_score(f.si_avg, f.ti_avg) for f in features])


DEFAULT_FQ_EDGES = tuple(float(e) for e in range(0, 55, 5))


@dataclass
class HeatMap:
    mean: np.ndarray  # complexity bins x f_q bins, nan where empty
    count: np.ndarray
    complexity_edges: np.ndarray
    fq_edges: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            labels = [f"fq[{a:g},{b:g})" for a, b in zip(self.fq_edges[:-1], self.fq_edges[1:])]
            w.writerow(["complexity_bin"] + labels)
            for i in range(self.mean.shape[0]):
                lo, hi = self.complexity_edges[i], self.complexity_edges[i + 1]
                cells = ["" if np.isnan(v) else f"{v:.6g}" for v in self.mean[i]]
                w.writerow([f"[{lo:.1f},{hi:.1f})"] + cells)


def _bin(value: float, edges: np.ndarray) -> int:
    # right-closed last bin so the top edge is included
    idx = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(idx, 0), len(edges) - 2)


def complexity_heatmap(results: Iterable[tuple[float, float, float]], complexity_bins: int = 10,
                       fq_edges: Sequence[float] = DEFAULT_FQ_EDGES) -> HeatMap:
    """Mean BD-rate per (complexity bin, f_q bin); complexity bins are 1/complexity_bins wide."""
    c_edges = np.linspace(0.0, 1.0, complexity_bins + 1)
    f_edges = np.asarray(fq_edges, dtype=np.float64)
    total = np.zeros((complexity_bins, len(f_edges) - 1))
    count = np.zeros_like(total, dtype=np.int64)
    for complexity, f_q, value in results:
        if not 0.0 <= complexity <= 1.0:
            raise ValueError(f"complexity {complexity} outside [0, 1]")
        i = min(int(complexity * complexity_bins), complexity_bins - 1)
        j = _bin(f_q, f_edges)
        total[i, j] += value
        count[i, j] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return HeatMap(mean, count, c_edges, f_edges)


# --- results files --------------------------------------------------------------

def write_results(rows: Sequence[dict], path: str | Path | None) -> None:
    import sys

    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({"schema_version": RESULTS_SCHEMA_VERSION, **row})
    finally:
        if fh is not sys.stdout:
            fh.close()


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        version = int(row.get("schema_version") or RESULTS_SCHEMA_VERSION)
        if version != RESULTS_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported results schema_version {version}")
        row["bitrate_kbps"] = float(row["bitrate_kbps"])
        row["target_kbps"] = float(row["target_kbps"])
        row["score"] = float(row["score"])
    return rows


def curves_from_rows(rows: Iterable[dict], metric: str) -> dict[str, RdCurve]:
    """One curve per clip for the given metric."""
    by_clip: dict[str, list[RdPoint]] = {}
    codec = {}
    for row in rows:
        if row["metric"] != metric:
            continue
        by_clip.setdefault(row["clip"], []).append(
            RdPoint(row["bitrate_kbps"], row["score"], metric, row["target_kbps"]))
        codec[row["clip"]] = row["codec"]
    return {c: RdCurve(pts, codec[c], c) for c, pts in by_clip.items()}


def bdbr_table(anchor_rows: Iterable[dict], test_rows: Iterable[dict], metric: str) -> dict[str, BdbrResult]:
    anchor = curves_from_rows(anchor_rows, metric)
    test = curves_from_rows(test_rows, metric)
    missing = sorted(set(anchor) ^ set(test))
    if missing:
        raise ValueError(f"clips present in only one result set: {missing}")
    return {clip: bdbr(anchor[clip], test[clip]) for clip in sorted(anchor)}

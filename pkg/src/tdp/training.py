"""End-to-end training on 3-frame patch sub-sequences.

Per step: features -> f_d (DPI), probe QP -> f_q (DQL) and lambda (DlamT),
P(x) = f_d * x_m + x, simulator in train mode, D + lambda * R, Adam.

All randomness is derived from ``(cfg.seed, step)`` so a run resumed from a
checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .bundle import CKPT_NAME, TdpModels
from .codec_sim import dynamic_quant_level, simulate
from .config import TdpConfig
from .dpn import apply_intensity, dpn_mask
from .fen import Normalizer, fen_forward, fit_normalizer
from .loss import LambdaMap, NonFiniteLossError, RdLossTerms, rd_loss
from .numerics import ParamStore, backward
from .preanalysis import EncoderProbe, FeatureVector, features_from_lumas, probe_qp
from .video_io import Clip, clip_from_luma, read_video, to_normalized_luma

log = logging.getLogger(__name__)

SUBSEQ_LEN = 3
METRICS_NAME = "metrics.csv"
METRIC_FIELDS = ("step", "loss", "distortion", "rate_bpp", "lambda", "f_d", "f_q", "qp", "label", "clip")


# --- synthetic corpus -----------------------------------------------------

STRATA = ("flat", "gradient", "noise")


def synthetic_clip(kind: str, rng: np.random.Generator, size: int = 96, frames: int = 6) -> Clip:
    """One 8-bit clip of the given complexity stratum.

    flat: a single gray level, static. gradient: a smooth ramp drifting one
    pixel per frame. noise: i.i.d. uniform noise around a gray level.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    lumas = []
    if kind == "flat":
        level = rng.uniform(40, 215)
        lumas = [np.full((size, size), level) for _ in range(frames)]
    elif kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        slope = rng.uniform(0.5, 1.5)
        base = rng.uniform(60, 190)
        for t in range(frames):
            proj = (xx - t) * np.cos(angle) + yy * np.sin(angle) - size / 2
            lumas.append(base + slope * proj * 0.5)
    elif kind == "noise":
        level = rng.uniform(80, 175)
        amp = rng.uniform(40, 80)
        lumas = [level + rng.uniform(-amp, amp, (size, size)) for _ in range(frames)]
    else:
        raise ValueError(f"unknown stratum {kind!r}; expected one of {STRATA}")
    return clip_from_luma([np.clip(np.rint(y), 0, 255).astype(np.uint8) for y in lumas])


def synthetic_corpus(per_stratum: int = 4, seed: int = 0, size: int = 96,
                     frames: int = 6) -> list[tuple[str, str, Clip]]:
    """Complexity-stratified corpus as (clip_id, label, clip) triples."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in STRATA:
        for i in range(per_stratum):
            out.append((f"{kind}_{i:02d}", kind, synthetic_clip(kind, rng, size, frames)))
    return out


# --- dataset ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainSample:
    patches: np.ndarray  # 3 x H x W float32 in [0, 1]
    features: FeatureVector
    qp: float
    clip_id: str
    label: str
    origin: tuple[int, int, int]  # (first frame, top, left)


@dataclass
class Dataset:
    samples: list[TrainSample]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def manifest_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(f"{s.clip_id}:{s.label}:{s.origin}:{s.qp!r}".encode())
            h.update(s.features.as_array().tobytes())
            h.update(s.patches.tobytes())
        return h.hexdigest()

    def fit_normalizer(self) -> Normalizer:
        if len(self.samples) < 2:
            return Normalizer.identity()
        return fit_normalizer([s.features for s in self.samples])


def build_dataset(clips: Iterable, patch_size: int, samples_per_clip: int, seed: int = 0,
                  probe_bitrate: float = 1500.0, encoder: EncoderProbe | None = None,
                  probe_fallback: bool = True, probe_cache: str | None = None) -> Dataset:
    """Random crops of 3 consecutive frames from each clip.

    ``clips`` holds paths, ``Clip`` objects, or ``(clip_id, label, clip)``
    triples. SI/TI are computed on the cropped sub-sequence; the QP comes from
    the clip-level probe.
    """
    rng = np.random.default_rng(seed)
    samples, skipped = [], []
    for idx, item in enumerate(clips):
        if isinstance(item, tuple):
            clip_id, label, clip = item
        elif isinstance(item, Clip):
            clip_id, label, clip = f"clip{idx:03d}", "user", item
        else:
            clip_id, label, clip = Path(item).stem, "user", read_video(item)
        if len(clip) < SUBSEQ_LEN:
            log.warning("skipping %s: %d frames, need %d", clip_id, len(clip), SUBSEQ_LEN)
            skipped.append(clip_id)
            continue
        if clip.width < patch_size or clip.height < patch_size:
            log.warning("skipping %s: %dx%d smaller than patch %d", clip_id, clip.width, clip.height, patch_size)
            skipped.append(clip_id)
            continue
        probe = probe_qp(clip, probe_bitrate, encoder, fallback=probe_fallback, cache_dir=probe_cache)
        lumas = [to_normalized_luma(f, clip.bit_depth) for f in clip.frames]
        for _ in range(samples_per_clip):
            t0 = int(rng.integers(0, len(clip) - SUBSEQ_LEN + 1))
            y0 = int(rng.integers(0, clip.height - patch_size + 1))
            x0 = int(rng.integers(0, clip.width - patch_size + 1))
            patches = np.stack([l[y0:y0 + patch_size, x0:x0 + patch_size] for l in lumas[t0:t0 + SUBSEQ_LEN]])
            feats = features_from_lumas(list(patches), probe.clip_qp)
            samples.append(TrainSample(patches.astype(np.float32), feats, probe.clip_qp, clip_id, label,
                                       (t0, y0, x0)))
    return Dataset(samples, skipped)


# --- training step ---------------------------------------------------------

@dataclass
class StepResult:
    terms: RdLossTerms
    f_d: float
    f_q: float


def _lambda_map(cfg: TdpConfig) -> LambdaMap:
    return LambdaMap(cfg.lambda_k, cfg.lambda_b, cfg.lambda_min, cfg.lambda_max)


def forward_sample(models: TdpModels, sample: TrainSample, cfg: TdpConfig,
                   generator: torch.Generator | None = None, mode: str = "train"):
    """Forward pass only; returns (terms, f_d tensor, f_q)."""
    dtype = models.dpn.head.weight.dtype
    x = torch.from_numpy(sample.patches).to(dtype)[:, None]
    if cfg.enable_dpi:
        f_d = fen_forward(models.fen, sample.features, models.normalizer)
    else:
        f_d = torch.tensor(cfg.fixed_f_d, dtype=dtype)
    f_q = dynamic_quant_level(sample.qp, cfg.fq_min, cfg.fq_max).f_q if cfg.enable_dql else cfg.fixed_f_q
    lam = None if cfg.enable_dlamt else cfg.fixed_lambda
    x_pre = apply_intensity(x, dpn_mask(models.dpn, x), f_d)
    recon, bits = simulate(models.sim, x_pre, f_q, mode, generator)
    terms = rd_loss(x, recon, bits, sample.qp, x.numel(), lam=lam, lmap=_lambda_map(cfg))
    return terms, f_d, f_q


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


def train_step(models: TdpModels, sample: TrainSample | Sequence[TrainSample], cfg: TdpConfig,
               store: ParamStore, step: int = 0, lr: float | None = None) -> StepResult:
    """One optimization step. Parameters are untouched if anything is non-finite.

    A sequence of samples accumulates gradients of the mean loss before the
    update; the returned terms are those of the last sample.
    """
    batch = [sample] if isinstance(sample, TrainSample) else list(sample)
    for module in models.modules().values():
        module.zero_grad(set_to_none=True)
    gen = step_generator(cfg.seed, step)
    for s in batch:
        terms, f_d, f_q = forward_sample(models, s, cfg, gen)
        backward(terms.total / len(batch))
    bad = [n for n, p in store.trainable() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        store.zero_grad()
        raise NonFiniteLossError(f"step {step}: non-finite gradients in {bad[:5]} "
                                 f"(clip {batch[-1].clip_id}, {terms.as_floats()})")
    store.step(cfg.lr if lr is None else lr)
    return StepResult(terms, float(f_d.detach()), float(f_q))


def make_store(models: TdpModels, cfg: TdpConfig) -> ParamStore:
    """Store for the main phase (after any simulator warm-up)."""
    store = models.param_store()
    if not cfg.enable_dpi:
        store.freeze("fen.")
    if cfg.freeze_simulator or cfg.sim_warmup_steps > 0:
        store.freeze("sim.")
    return store


def make_warmup_store(models: TdpModels) -> ParamStore:
    return ParamStore.from_modules({"sim": models.sim})


def _phase(cfg: TdpConfig, step: int, warm: ParamStore, main: ParamStore) -> tuple[ParamStore, float]:
    if step < cfg.sim_warmup_steps:
        return warm, cfg.sim_warmup_lr or cfg.lr
    return main, cfg.lr


def sample_index(seed: int, step: int, n: int) -> int:
    epoch, pos = divmod(step, n)
    return int(np.random.default_rng([seed, epoch]).permutation(n)[pos])


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    bundle_dir: Path
    metrics: list[dict]
    models: TdpModels


def _read_metrics(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["step"]) < upto]


def _write_metrics(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        w.writerows(rows)


def train(cfg: TdpConfig, dataset: Dataset, out_dir: str | Path, *, resume: bool = False,
          stop_after: int | None = None) -> TrainResult:
    """Train for ``cfg.steps`` steps, checkpointing into ``out_dir``.

    With ``resume`` the latest checkpoint in ``out_dir`` is restored and the
    metrics log truncated to match it. ``stop_after`` ends the run early
    (after saving a checkpoint), which is how interruption is simulated.
    """
    if not dataset.samples:
        raise ValueError("empty training dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_NAME

    start = 0
    if resume and (out_dir / CKPT_NAME).exists():
        holder: list = []
        models, meta = TdpModels.load(out_dir, holder)
        _, tensors = holder
        warm, main = make_warmup_store(models), make_store(models, cfg)
        # sim Adam state belongs to whichever phase owns the simulator
        if cfg.sim_warmup_steps > 0:
            warm.load_optimizer_state(tensors, cfg.sim_warmup_lr or cfg.lr)
        main.load_optimizer_state(tensors, cfg.lr)
        start = int(meta["step"])
        rows = _read_metrics(metrics_path, start)
        log.info("resumed %s at step %d", out_dir, start)
    else:
        models = TdpModels.build(cfg, dataset.fit_normalizer())
        warm, main = make_warmup_store(models), make_store(models, cfg)
        rows = []

    def save(step: int) -> None:
        extra = warm.optimizer_state() if cfg.sim_warmup_steps > 0 else {}
        models.save(out_dir, main, {"step": step, "seed": cfg.seed}, extra_state=extra)
        _write_metrics(metrics_path, rows)

    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    n = len(dataset)
    k = cfg.grad_accum
    for step in range(start, end):
        batch = [dataset.samples[sample_index(cfg.seed, step * k + j, n)] for j in range(k)]
        store, lr = _phase(cfg, step, warm, main)
        res = train_step(models, batch, cfg, store, step, lr)
        sample = batch[-1]
        rows.append({"step": step, **res.terms.as_floats(), "f_d": res.f_d, "f_q": res.f_q,
                     "qp": sample.qp, "label": sample.label, "clip": sample.clip_id})
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == end:
            save(done)
    if start >= end:
        save(start)
    return TrainResult(out_dir, rows, models)


def window_means(losses: Sequence[float], window: int = 20) -> tuple[float, float]:
    """Mean of the first and last ``window`` entries."""
    return float(np.mean(losses[:window])), float(np.mean(losses[-window:]))


@torch.no_grad()
def mean_fd_by_label(models: TdpModels, dataset: Dataset) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for s in dataset.samples:
        acc.setdefault(s.label, []).append(float(fen_forward(models.fen, s.features, models.normalizer)))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# --- ablation ---------------------------------------------------------------

# (DPI, DQL, DlamT) rows of the ablation table
ABLATION_ROWS = (
    ("dpi", (True, False, False)),
    ("dql", (False, True, False)),
    ("dlamt", (False, False, True)),
    ("full", (True, True, True)),
)


def ablation_configs(base: TdpConfig) -> list[tuple[str, TdpConfig]]:
    return [(name, base.replace(enable_dpi=a, enable_dql=b, enable_dlamt=c)) for name, (a, b, c) in ABLATION_ROWS]


def run_ablation(base: TdpConfig, dataset: Dataset, out_root: str | Path) -> list[TrainResult]:
    out_root = Path(out_root)
    return [train(cfg, dataset, out_root / name) for name, cfg in ablation_configs(base)]


def static_baseline_config(base: TdpConfig) -> TdpConfig:
    """All dynamic components off: fixed intensity, quantization level and lambda."""
    return base.replace(enable_dpi=False, enable_dql=False, enable_dlamt=False,
                        fixed_f_d=1.0, fixed_f_q=30.0, fixed_lambda=1e-4)

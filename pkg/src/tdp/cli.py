"""Command-line entry point: ``tdp <command> ...``.

Commands::

    analyze      SI/TI features and probe QP per clip (JSON)
    train        train FEN, DPN and the codec simulator
    preprocess   apply a trained bundle to a clip (writes Y4M)
    evaluate     encode a bitrate ladder and score it (CSV); alias encode-ladder
    bdbr         BD-rate of a test results CSV against an anchor CSV
    heatmap      mean BD-rate by complexity bin and f_q bin (CSV)
    ablate       train the four DPI/DQL/DlamT ablation rows

Exit status: 0 on success, 1 when a computation fails, 2 for usage,
configuration or missing-checkpoint errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from contextlib import contextmanager
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
JSON_SCHEMA_VERSION = 1

log = logging.getLogger("tdp")


class UsageError(Exception):
    pass


@contextmanager
def _open_out(path: str | None):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _emit_json(obj, path: str | None) -> None:
    with _open_out(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def load_config(args):
    """Config file, then --set overrides, then explicit flags (flags win)."""
    from .config import TdpConfig

    cfg = TdpConfig.load(args.config) if getattr(args, "config", None) else TdpConfig()
    cfg = cfg.with_overrides(getattr(args, "set", None) or [])
    flags = {}
    for key in ("seed", "jobs", "steps"):
        val = getattr(args, key, None)
        if val is not None:
            flags[key] = val
    if getattr(args, "probe_bitrate", None) is not None:
        flags["probe_bitrate"] = args.probe_bitrate
    if getattr(args, "probe_encoder", None) is not None:
        flags["probe_encoder"] = None if args.probe_encoder == "none" else args.probe_encoder
    if getattr(args, "bitrates", None) is not None:
        flags["bitrates"] = tuple(args.bitrates)
    return cfg.replace(**flags) if flags else cfg


# --- commands -----------------------------------------------------------------

def cmd_analyze(args) -> int:
    from .preanalysis import EncoderProbe, analyze_clip
    from .video_io import read_video

    cfg = load_config(args)
    encoder = EncoderProbe(cfg.probe_encoder) if cfg.probe_encoder else None
    clips = []
    for path in args.inputs:
        clip = read_video(path)
        feats, probe = analyze_clip(clip, cfg.probe_bitrate, encoder, fallback=cfg.probe_fallback,
                                    cache_dir=cfg.probe_cache)
        clips.append({"path": str(path), "id": Path(path).stem, "frames": len(clip),
                      "width": clip.width, "height": clip.height, "features": feats.to_dict(),
                      "probe": {"clip_qp": probe.clip_qp, "per_frame_qp": list(probe.per_frame_qp),
                                "source": probe.source, "bitrate_kbps": probe.bitrate_kbps}})
    _emit_json({"schema_version": JSON_SCHEMA_VERSION, "clips": clips}, args.json)
    return EXIT_OK


def _training_clips(args, cfg):
    from .training import synthetic_corpus

    if args.data:
        return list(args.data)
    return synthetic_corpus(args.synthetic, seed=cfg.seed, size=max(96, cfg.patch_size))


def _dataset(args, cfg):
    from .preanalysis import EncoderProbe
    from .training import build_dataset

    encoder = EncoderProbe(cfg.probe_encoder) if cfg.probe_encoder else None
    ds = build_dataset(_training_clips(args, cfg), cfg.patch_size, cfg.samples_per_clip, seed=cfg.seed,
                       probe_bitrate=cfg.probe_bitrate, encoder=encoder, probe_fallback=cfg.probe_fallback,
                       probe_cache=cfg.probe_cache)
    if not ds.samples:
        raise UsageError("no usable training clips (need >= 3 frames and at least patch_size pixels per side)")
    return ds


def cmd_train(args) -> int:
    from .training import mean_fd_by_label, train, window_means

    cfg = load_config(args)
    ds = _dataset(args, cfg)
    res = train(cfg, ds, args.out, resume=args.resume)
    losses = [float(r["loss"]) for r in res.metrics]
    summary = {"schema_version": JSON_SCHEMA_VERSION, "bundle": str(res.bundle_dir), "steps": len(losses),
               "dataset_hash": ds.manifest_hash(), "mean_f_d": mean_fd_by_label(res.models, ds)}
    if losses:
        first, last = window_means(losses)
        summary.update(loss_first=first, loss_last=last)
    _emit_json(summary, args.json)
    return EXIT_OK


def _load_bundle(path):
    from .bundle import TdpModels

    models, _ = TdpModels.load(path)
    return models.eval()


def cmd_preprocess(args) -> int:
    from .dpn import preprocess_clip
    from .video_io import read_video, write_y4m

    cfg = load_config(args)
    models = _load_bundle(args.checkpoint)
    clip = read_video(args.input)
    out, f_d = preprocess_clip(models, clip, cfg=cfg, force_fd=args.force_fd)
    write_y4m(out, args.output)
    log.info("wrote %s with f_d=%.6f", args.output, f_d)
    if args.json:
        _emit_json({"schema_version": JSON_SCHEMA_VERSION, "input": str(args.input), "output": str(args.output),
                    "f_d": f_d}, args.json)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation.codecs import LadderJob, get_profile, run_ladder
    from .evaluation.rd import write_results
    from .video_io import read_video

    cfg = load_config(args)
    if args.references and len(args.references) != len(args.inputs):
        raise UsageError(f"--references needs one path per input ({len(args.inputs)}), got {len(args.references)}")
    profile = get_profile(args.codec)
    jobs = []
    for i, path in enumerate(args.inputs):
        ref_path = args.references[i] if args.references else None
        clip_id = Path(ref_path or path).stem
        jobs.append(LadderJob(clip_id, read_video(path), read_video(ref_path) if ref_path else None))
    res = run_ladder(jobs, profile, cfg.bitrates, args.metrics, workers=cfg.jobs, keep_going=args.keep_going)
    write_results(res.rows, args.output)
    if res.failures:
        for clip_id, kbps, msg in res.failures:
            print(f"failed: {clip_id} @ {kbps:g} kbps: {msg.splitlines()[0]}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _bdbr_results(anchor_csv, test_csv, metric):
    from .evaluation.rd import bdbr_table, read_results

    return bdbr_table(read_results(anchor_csv), read_results(test_csv), metric)


def cmd_bdbr(args) -> int:
    import numpy as np

    from .evaluation.rd import bad_case_rate

    table = _bdbr_results(args.anchor, args.test, args.metric)
    valid = [r.value for r in table.values() if r.valid]
    for clip, r in table.items():
        print(f"{clip}\t{r.value:.2f}" if r.valid else f"{clip}\tinvalid ({'; '.join(r.notes)})")
    if valid:
        print(f"mean\t{float(np.mean(valid)):.2f}")
        print(f"bad_case_rate\t{bad_case_rate(valid):.4f}")
    if args.json:
        _emit_json({"schema_version": JSON_SCHEMA_VERSION, "metric": args.metric,
                    "clips": {c: {"bdbr": r.value if r.valid else None, "valid": r.valid,
                                  "overlap": list(r.overlap_span), "notes": list(r.notes)}
                              for c, r in table.items()}}, args.json)
    return EXIT_OK if len(valid) == len(table) else EXIT_FAIL


def cmd_heatmap(args) -> int:
    from .codec_sim import dynamic_quant_level
    from .evaluation.rd import complexity_heatmap, normalized_complexity
    from .preanalysis import FeatureVector

    table = _bdbr_results(args.anchor, args.test, args.metric)
    analysis = json.loads(Path(args.analysis).read_text())
    by_id = {c["id"]: c for c in analysis["clips"]}
    missing = sorted(set(table) - set(by_id))
    if missing:
        raise UsageError(f"clips missing from {args.analysis}: {missing}")
    ids = sorted(table)
    feats = [FeatureVector(**by_id[i]["features"]) for i in ids]
    complexity = normalized_complexity(feats)
    results = [(c, dynamic_quant_level(by_id[i]["probe"]["clip_qp"]).f_q, table[i].value)
               for c, i in zip(complexity, ids) if table[i].valid]
    heat = complexity_heatmap(results)
    heat.to_csv(args.output)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .training import ABLATION_ROWS, ablation_configs, train, window_means

    cfg = load_config(args)
    if args.list:
        for name, (dpi, dql, dlamt) in ABLATION_ROWS:
            print(f"{name}\tDPI={'on' if dpi else 'off'}\tDQL={'on' if dql else 'off'}\t"
                  f"DlamT={'on' if dlamt else 'off'}")
        return EXIT_OK
    if not args.out:
        raise UsageError("ablate needs --out unless --list is given")
    ds = _dataset(args, cfg)
    rows = []
    for name, row_cfg in ablation_configs(cfg):
        res = train(row_cfg, ds, Path(args.out) / name)
        losses = [float(r["loss"]) for r in res.metrics]
        first, last = window_means(losses) if losses else (math.nan, math.nan)
        rows.append({"row": name, "enable_dpi": row_cfg.enable_dpi, "enable_dql": row_cfg.enable_dql,
                     "enable_dlamt": row_cfg.enable_dlamt, "loss_first": first, "loss_last": last,
                     "bundle": str(res.bundle_dir)})
        print(f"{name}\tloss {first:.4f} -> {last:.4f}")
    if args.json:
        _emit_json({"schema_version": JSON_SCHEMA_VERSION, "rows": rows}, args.json)
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--jobs", type=int, help="upper bound on parallel workers")
    common.add_argument("-v", "--verbose", action="count", default=0)

    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--probe-bitrate", type=float, help="QP probe bitrate in kbps (default 1500)")
    probe.add_argument("--probe-encoder", help="probe encoder binary, or 'none' for the SI/TI fallback")

    data = argparse.ArgumentParser(add_help=False)
    src = data.add_mutually_exclusive_group()
    src.add_argument("--data", nargs="+", metavar="CLIP", help="training clips (Y4M)")
    src.add_argument("--synthetic", type=int, default=4, metavar="N",
                     help="use the synthetic flat/gradient/noise corpus with N clips per stratum (default)")
    data.add_argument("--steps", type=int)

    p = argparse.ArgumentParser(prog="tdp", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    a = sub.add_parser("analyze", parents=[common, probe], help="features and probe QP per clip")
    a.add_argument("inputs", nargs="+")
    a.add_argument("--json", default="-", help="output path, '-' for stdout (default)")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", parents=[common, probe, data], help="train a bundle")
    t.add_argument("--out", required=True, help="bundle directory")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--json", default=None, help="write a run summary here ('-' for stdout)")
    t.set_defaults(func=cmd_train)

    pp = sub.add_parser("preprocess", parents=[common, probe], help="apply a trained bundle")
    pp.add_argument("input")
    pp.add_argument("--checkpoint", required=True, help="bundle directory from 'tdp train'")
    pp.add_argument("--output", required=True, help="output Y4M")
    pp.add_argument("--force-fd", type=_unit_float, help="use this intensity instead of the FEN prediction")
    pp.add_argument("--json", default=None)
    pp.set_defaults(func=cmd_preprocess)

    for name in ("evaluate", "encode-ladder"):
        e = sub.add_parser(name, parents=[common], help="encode a bitrate ladder and score it")
        e.add_argument("inputs", nargs="+")
        e.add_argument("--references", nargs="+", help="original clips to score against, one per input")
        e.add_argument("--codec", default="x264", help="codec profile (x264, x265, vvenc, stub-lossless, stub-noisy)")
        e.add_argument("--bitrates", type=_float_list, help="target kbps list (default 1000,2500,4000,5000)")
        e.add_argument("--metrics", type=lambda s: [m for m in s.split(",") if m], default=["ms-ssim"],
                       help="comma-separated: ms-ssim, ssim, psnr, vmaf, vmaf_neg")
        e.add_argument("--output", default="-", help="results CSV, '-' for stdout")
        e.add_argument("--keep-going", action="store_true", help="record failed encodes and continue")
        e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bdbr", parents=[common], help="BD-rate of test vs anchor results")
    b.add_argument("anchor")
    b.add_argument("test")
    b.add_argument("--metric", default="ms-ssim")
    b.add_argument("--json", default=None)
    b.set_defaults(func=cmd_bdbr)

    h = sub.add_parser("heatmap", parents=[common], help="BD-rate by complexity and f_q")
    h.add_argument("anchor")
    h.add_argument("test")
    h.add_argument("--analysis", required=True, help="JSON from 'tdp analyze' on the original clips")
    h.add_argument("--metric", default="ms-ssim")
    h.add_argument("--output", required=True, help="heat-map CSV")
    h.set_defaults(func=cmd_heatmap)

    ab = sub.add_parser("ablate", parents=[common, probe, data], help="train the ablation rows")
    ab.add_argument("--out", help="root directory; one bundle per row")
    ab.add_argument("--list", action="store_true", help="only print the rows")
    ab.add_argument("--json", default=None)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")

    from .bundle import MissingCheckpointError
    from .config import ConfigError

    try:
        return args.func(args)
    except (UsageError, ConfigError, MissingCheckpointError) as exc:
        print(f"tdp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"tdp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a computation error
        log.debug("traceback", exc_info=True)
        print(f"tdp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

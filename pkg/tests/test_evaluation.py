import csv
import json
import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tdp.evaluation import codecs, metrics, rd, stub
from tdp.evaluation.codecs import CodecError, CodecProfile, LadderJob, encode_and_measure, get_profile, run_ladder
from tdp.evaluation.rd import (BdbrResult, MonotoneViolationWarning, RdCurve, RdPoint, bad_case_rate, bdbr,
                               bdbr_table, complexity_heatmap, normalize_scores, normalized_complexity,
                               read_results, write_results)
from tdp.loss import ms_ssim
from tdp.preanalysis import FeatureVector, features_from_lumas
from tdp.video_io import clip_from_luma, read_y4m, write_y4m

RATES = [1000.0, 2500.0, 4000.0, 5000.0]


def curve(rates, quals, **kw):
    return RdCurve.from_arrays(rates, quals, **kw)


# --- BD-rate ----------------------------------------------------------------

def test_identical_curves_give_zero():
    c = curve(RATES, [0.90, 0.94, 0.96, 0.97])
    r = bdbr(c, c)
    assert r.valid and r.value == pytest.approx(0.0, abs=1e-9)


def test_scaled_rates_give_exact_percentage():
    q = [0.90, 0.94, 0.96, 0.97]
    r = bdbr(curve(RATES, q), curve([0.9 * x for x in RATES], q))
    assert r.value == pytest.approx(-10.0, abs=0.01)


def _smooth_pair(rng):
    # log10 rate as a smooth increasing function of quality on [0, 1]
    a0, a1, a2 = rng.uniform(2.5, 3.5), rng.uniform(0.5, 1.5), rng.uniform(-0.2, 0.3)
    s0, s1 = rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)

    def anchor(q):
        return 10 ** (a0 + a1 * q + a2 * q ** 2)

    def test(q):
        return 10 ** (a0 + s0 + (a1 + s1) * q + a2 * q ** 2)

    return anchor, test


def test_random_smooth_pairs_match_dense_integration():
    rng = np.random.default_rng(7)
    q = np.linspace(0.0, 1.0, 6)
    for _ in range(100):
        anchor, test = _smooth_pair(rng)
        got = bdbr(curve(anchor(q), q), curve(test(q), q)).value
        want = oracles.dense_bdbr(anchor, test, 0.0, 1.0)
        assert abs(got - want) < 0.5


def test_partial_overlap_uses_common_range():
    rng = np.random.default_rng(8)
    anchor, test = _smooth_pair(rng)
    qa, qt = np.linspace(0.0, 0.8, 9), np.linspace(0.2, 1.0, 9)
    r = bdbr(curve(anchor(qa), qa), curve(test(qt), qt))
    assert r.overlap_span == pytest.approx((0.2, 0.8))
    assert r.value == pytest.approx(oracles.dense_bdbr(anchor, test, 0.2, 0.8), abs=0.5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.5, 20), shift=st.floats(-5, 5))
def test_antisymmetry_and_affine_quality_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    anchor, test = _smooth_pair(rng)
    q = np.linspace(0.0, 1.0, 5)
    a, t = curve(anchor(q), q), curve(test(q), q)
    fwd, back = bdbr(a, t).value, bdbr(t, a).value
    # in log-rate terms the two directions are exact negatives
    assert math.log10(1 + fwd / 100) == pytest.approx(-math.log10(1 + back / 100), abs=1e-9)
    assert abs(fwd + back) < 0.1 or abs(fwd) > 3
    qq = q * scale + shift
    moved = bdbr(curve(anchor(q), qq), curve(test(q), qq)).value
    assert moved == pytest.approx(fwd, abs=1e-6)


def test_no_overlap_is_invalid():
    r = bdbr(curve(RATES, [0.1, 0.2, 0.3, 0.4]), curve(RATES, [0.5, 0.6, 0.7, 0.8]))
    assert not r.valid and math.isnan(r.value) and "no quality overlap" in r.notes


def test_non_monotone_and_duplicates_warn_and_average():
    with pytest.warns(MonotoneViolationWarning):
        r = bdbr(curve(RATES, [0.9, 0.95, 0.94, 0.97]), curve(RATES, [0.9, 0.95, 0.94, 0.97]))
    assert r.value == pytest.approx(0.0, abs=1e-9)
    dup = curve(RATES, [0.9, 0.95, 0.95, 0.97])
    r = bdbr(dup, dup)
    assert any("duplicate" in n for n in r.notes)


def test_lossless_style_curves_degenerate_to_zero():
    c = curve(RATES, [1.0] * 4)
    r = bdbr(c, c)
    assert r.valid and r.value == 0.0 and "degenerate overlap" in r.notes


def test_metric_mismatch_and_point_validation():
    with pytest.raises(ValueError):
        bdbr(curve(RATES, [1, 2, 3, 4], metric="psnr"), curve(RATES, [1, 2, 3, 4]))
    with pytest.raises(ValueError):
        RdPoint(0.0, 0.5)
    with pytest.raises(ValueError):
        RdPoint(10.0, float("nan"))
    assert curve([100, 100, 200], [1, 2, 3]).problems() == ["3 points, want at least 4",
                                                            "bitrates not strictly increasing"]


def test_bad_case_rate():
    assert bad_case_rate([-1, 2, -3, 4]) == 0.5
    assert bad_case_rate([-1, -2]) == 0.0
    assert bad_case_rate([BdbrResult(float("nan"), (0, 0), False), 1.0]) == 1.0
    with pytest.raises(ValueError):
        bad_case_rate([])


# --- complexity and heat map -------------------------------------------------------

def test_heatmap_binning():
    hm = complexity_heatmap([(0.95, 12.0, -4.0)])
    assert hm.mean.shape == (10, 10)
    assert hm.count.sum() == 1 and hm.count[9, 2] == 1 and hm.mean[9, 2] == -4.0
    assert np.isnan(hm.mean[0, 0])
    hm = complexity_heatmap([(1.0, 50.0, 1.0), (0.0, 0.0, 3.0), (0.0, 1.0, 5.0)])
    assert hm.count[9, 9] == 1 and hm.mean[0, 0] == 4.0
    with pytest.raises(ValueError):
        complexity_heatmap([(1.5, 10.0, 0.0)])


def test_heatmap_constant_values_and_csv(tmp_path):
    rng = np.random.default_rng(0)
    hm = complexity_heatmap([(rng.random(), rng.uniform(1, 50), 2.5) for _ in range(200)])
    filled = hm.mean[~np.isnan(hm.mean)]
    assert np.all(filled == 2.5)
    hm.to_csv(tmp_path / "h.csv")
    with open(tmp_path / "h.csv", newline="") as fh:
        table = list(csv.reader(fh))
    assert len(table) == 11 and table[0][:2] == ["complexity_bin", "fq[0,5)"]


def _features(lumas):
    return features_from_lumas([np.asarray(x, np.float64) / 255 for x in lumas], 30.0)


def test_normalized_complexity():
    rng = np.random.default_rng(1)
    flat = _features([np.full((32, 32), 100)] * 3)
    busy = _features([rng.integers(0, 256, (32, 32)) for _ in range(3)])
    mid = _features([rng.integers(100, 140, (32, 32)) for _ in range(3)])
    scores = normalized_complexity([flat, busy, mid])
    assert scores[0] == 0.0 and scores[1] == 1.0 and 0.0 < scores[2] < 1.0
    assert normalized_complexity([busy, busy]) == [0.5, 0.5]
    assert normalize_scores([]) == []


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), amp=st.integers(5, 60))
def test_added_noise_does_not_lower_complexity(seed, amp):
    rng = np.random.default_rng(seed)
    base = [np.clip(rng.integers(100, 110, (24, 24)), 0, 255) for _ in range(3)]
    noisy = [np.clip(b + rng.integers(-amp, amp + 1, b.shape), 0, 255) for b in base]
    fb, fn = _features(base), _features(noisy)
    assert rd.complexity_score(fn.si_avg, fn.ti_avg) >= rd.complexity_score(fb.si_avg, fb.ti_avg) - 1e-12


def test_feature_vector_attributes_used_by_complexity():
    assert {"si_avg", "ti_avg"} <= set(FeatureVector.__dataclass_fields__)


# --- results files ------------------------------------------------------------------

def _rows(clip, scores, codec="stub"):
    return [{"clip": clip, "codec": codec, "target_kbps": r, "bitrate_kbps": r, "metric": "ms-ssim",
             "score": s, "tool_version": "t"} for r, s in zip(RATES, scores)]


def test_results_round_trip_and_table(tmp_path):
    rows = _rows("a", [0.9, 0.93, 0.95, 0.96]) + _rows("b", [0.8, 0.85, 0.9, 0.92])
    write_results(rows, tmp_path / "r.csv")
    back = read_results(tmp_path / "r.csv")
    assert len(back) == 8 and back[0]["schema_version"] == "1" and back[3]["score"] == 0.96
    table = bdbr_table(back, back, "ms-ssim")
    assert list(table) == ["a", "b"] and all(r.value == pytest.approx(0.0, abs=1e-9) for r in table.values())
    with pytest.raises(ValueError):
        bdbr_table(back, _rows("a", [0.9, 0.93, 0.95, 0.96]), "ms-ssim")


def test_results_schema_version_checked(tmp_path):
    write_results(_rows("a", [0.9] * 4), tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().replace("\n1,", "\n7,")
    (tmp_path / "r.csv").write_text(text)
    with pytest.raises(ValueError):
        read_results(tmp_path / "r.csv")


# --- metrics -----------------------------------------------------------------------

def _textured_clip(seed=0, n=3, side=64):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side]
    return clip_from_luma([np.clip(128 + 60 * np.sin(xx / 5 + t) + rng.normal(0, 10, (side, side)), 0, 255)
                           .astype(np.uint8) for t in range(n)])


def test_clip_ms_ssim_matches_loss_function():
    ref, dist = _textured_clip(0), _textured_clip(1)
    want = np.mean([float(ms_ssim(torch.from_numpy(a.y / 255.0), torch.from_numpy(b.y / 255.0)))
                    for a, b in zip(ref.frames, dist.frames)])
    assert metrics.clip_ms_ssim(ref, dist) == pytest.approx(want, abs=1e-6)
    assert metrics.clip_ms_ssim(ref, ref) == pytest.approx(1.0, abs=1e-9)


def test_psnr_capped_and_geometry_checked():
    ref = _textured_clip(0)
    assert metrics.clip_psnr(ref, ref) == metrics.PSNR_CAP_DB
    with pytest.raises(metrics.MetricError):
        metrics.clip_psnr(ref, _textured_clip(0, side=32))
    with pytest.raises(metrics.MetricError):
        metrics.measure(ref, ref, ["bogus"])


def test_parse_vmaf_json():
    pooled = {"pooled_metrics": {"vmaf": {"mean": 91.5, "min": 80}}, "frames": []}
    assert metrics.parse_vmaf_json(json.dumps(pooled)) == 91.5
    frames = {"frames": [{"metrics": {"vmaf_neg": 80.0}}, {"metrics": {"vmaf_neg": 90.0}}]}
    assert metrics.parse_vmaf_json(json.dumps(frames), "vmaf_neg") == 85.0
    with pytest.raises(metrics.MetricError):
        metrics.parse_vmaf_json("{not json")
    with pytest.raises(metrics.MetricError):
        metrics.parse_vmaf_json(json.dumps({"frames": []}))


def test_vmaf_missing_binary_is_clear():
    ref = _textured_clip(0)
    with pytest.raises(metrics.MetricError, match="not found"):
        metrics.measure(ref, ref, ["vmaf"], vmaf=metrics.VmafTool("no-such-vmaf-binary"))


# --- stub codecs and ladder ---------------------------------------------------------

def test_noise_sigma_scaling():
    assert stub.noise_sigma(1000) == 8.0
    assert stub.noise_sigma(2000) == 4.0
    assert stub.noise_sigma(1000, 10) == 32.0


def test_noisy_stub_round_trip(tmp_path):
    clip = _textured_clip(0)
    src, enc, dec = tmp_path / "a.y4m", tmp_path / "a.stub", tmp_path / "b.y4m"
    write_y4m(clip, src)
    assert stub.main(["encode", "--mode", "noisy", "--bitrate", "5000", str(src), str(enc)]) == 0
    assert enc.stat().st_size == round(5000 * 1000 * clip.duration / 8)
    assert stub.main(["decode", str(enc), str(dec)]) == 0
    out = read_y4m(dec)
    diff = np.concatenate([(a.y.astype(float) - b.y.astype(float)).ravel() for a, b in zip(clip.frames, out.frames)])
    assert diff.std() == pytest.approx(1.6, rel=0.15)
    again = tmp_path / "c.y4m"
    stub.main(["decode", str(enc), str(again)])
    assert again.read_bytes() == dec.read_bytes()
    assert stub.main(["decode", str(tmp_path / "missing"), str(again)]) == 1


def test_lossless_stub_through_encode_and_measure():
    clip = _textured_clip(0)
    pts = encode_and_measure(clip, get_profile("stub-lossless"), 1000, metrics=("ms-ssim", "psnr"))
    assert [p.metric for p in pts] == ["ms-ssim", "psnr"]
    assert pts[0].quality == pytest.approx(1.0, abs=1e-9) and pts[1].quality == 100.0
    raw = sum(f.y.size + f.u.size + f.v.size for f in clip.frames)
    assert pts[0].bitrate > raw * 8 / clip.duration / 1000  # raw planes plus y4m headers


def test_noisy_ladder_monotone_and_reproducible():
    jobs = [LadderJob("a", _textured_clip(0)), LadderJob("b", _textured_clip(1))]
    first = run_ladder(jobs, get_profile("stub-noisy"), RATES, workers=2)
    second = run_ladder(jobs, get_profile("stub-noisy"), RATES, workers=1)
    assert len(first.rows) == 8 and not first.failures
    assert [r["score"] for r in first.rows] == [r["score"] for r in second.rows]
    for clip in ("a", "b"):
        c = rd.curves_from_rows(first.rows, "ms-ssim")[clip]
        assert not c.problems() and np.all(np.diff(c.qualities()) > 0)
        assert c.rates() == pytest.approx(RATES, rel=0.01)


def test_failing_profile_raises_or_is_collected(tmp_path):
    bad = CodecProfile("bad", ("{python}", "-c", "import sys; sys.exit(3)"), ("{python}", "-c", "pass"), ".x")
    with pytest.raises(CodecError) as info:
        encode_and_measure(_textured_clip(0), bad, 100)
    assert info.value.returncode == 3
    res = run_ladder([LadderJob("a", _textured_clip(0))], bad, [100, 200], keep_going=True)
    assert res.rows == [] and [f[1] for f in res.failures] == [100.0, 200.0]
    with pytest.raises(ValueError):
        get_profile("nope")
    missing = CodecProfile("m", ("no-such-encoder",), ("no-such-decoder",), ".x")
    assert not missing.available() and missing.version() == "unknown"


def test_reference_defaults_to_input_and_can_differ():
    orig, other = _textured_clip(0), _textured_clip(1)
    p_self = encode_and_measure(other, get_profile("stub-lossless"), 1000)[0]
    p_ref = encode_and_measure(other, get_profile("stub-lossless"), 1000, reference=orig)[0]
    assert p_self.quality == pytest.approx(1.0) and p_ref.quality < 0.99


def test_profiles_cover_required_codecs():
    assert {"x264", "x265", "vvenc", "stub-lossless", "stub-noisy"} <= set(codecs.PROFILES)
    cmd = codecs.PROFILES["x264"].encode_cmd(input="in.y4m", output="o.264", bitrate="2500")
    assert "--bitrate" in cmd and cmd[cmd.index("--bitrate") + 1] == "2500"


def test_no_warnings_for_clean_curves():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        bdbr(curve(RATES, [0.9, 0.92, 0.95, 0.99]), curve(RATES, [0.91, 0.93, 0.96, 0.98]))

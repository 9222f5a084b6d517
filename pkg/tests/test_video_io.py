from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdp.video_io import (Clip, TruncatedFrameError, VideoFormatError, clip_from_luma, frame_size_bytes,
                          from_normalized_luma, make_frame, read_video, read_y4m, read_y4m_bytes, read_yuv,
                          to_normalized_luma, write_y4m, write_yuv, y4m_bytes)


def fixture_bytes(frames=2, w=16, h=16, extra=b"") -> bytes:
    """Hand-assembled conformant 4:2:0 stream; samples follow a fixed pattern."""
    out = b"YUV4MPEG2 W%d H%d F30000:1001 Ip A1:1 C420jpeg%s\n" % (w, h, extra)
    for f in range(frames):
        out += b"FRAME\n"
        out += bytes((i * 7 + f) % 256 for i in range(w * h))
        out += bytes((i * 3 + 11 * f) % 256 for i in range((w // 2) * (h // 2) * 2))
    return out


def test_read_fixture(tmp_path):
    p = tmp_path / "a.y4m"
    p.write_bytes(fixture_bytes())
    clip = read_y4m(p)
    assert len(clip) == 2 and clip.width == 16 and clip.height == 16
    assert clip.frame_rate == Fraction(30000, 1001)
    assert clip.chroma == "420" and clip.bit_depth == 8
    assert clip.frames[1].y[0, 1] == (7 + 1) % 256
    assert clip.frames[0].u.shape == (8, 8)


def test_round_trip_byte_identical(tmp_path):
    data = fixture_bytes(3, 24, 12, extra=b" XYSCSS=420JPEG")
    p, q = tmp_path / "in.y4m", tmp_path / "out.y4m"
    p.write_bytes(data)
    write_y4m(read_y4m(p), q)
    assert q.read_bytes() == data


def test_header_without_colorspace_round_trips():
    data = b"YUV4MPEG2 W4 H2 F25:1\nFRAME\n" + bytes(range(8)) + bytes(4)
    assert y4m_bytes(read_y4m_bytes(data)) == data


def test_empty_file_is_parse_error(tmp_path):
    p = tmp_path / "empty.y4m"
    p.write_bytes(b"")
    with pytest.raises(VideoFormatError):
        read_y4m(p)


def test_bad_signature_reports_offset():
    with pytest.raises(VideoFormatError) as exc:
        read_y4m_bytes(b"YUV4MPEG3 W4 H4\n")
    assert exc.value.offset == 0


def test_bad_token_offset():
    with pytest.raises(VideoFormatError) as exc:
        read_y4m_bytes(b"YUV4MPEG2 W4 Hxx F25:1\n")
    assert exc.value.offset == len(b"YUV4MPEG2 W4 ")


def test_truncated_frame():
    data = fixture_bytes(2)
    with pytest.raises(TruncatedFrameError) as exc:
        read_y4m_bytes(data[:-10])
    assert exc.value.offset is not None and exc.value.offset > 0


def test_zero_frame_clip_is_header_only(tmp_path):
    clip = Clip((), 8, 8)
    p = tmp_path / "z.y4m"
    write_y4m(clip, p)
    assert p.read_bytes() == b"YUV4MPEG2 W8 H8 F30:1\n"
    assert len(read_y4m(p)) == 0


def test_ten_bit_header_and_round_trip(tmp_path):
    y = (np.arange(64, dtype=np.uint16).reshape(8, 8) * 16) % 1024
    clip = clip_from_luma([y], bit_depth=10)
    data = y4m_bytes(clip)
    assert b" C420p10" in data.split(b"\n")[0]
    back = read_y4m_bytes(data)
    assert back.bit_depth == 10
    np.testing.assert_array_equal(back.frames[0].y, y)
    assert y4m_bytes(back) == data


def test_raw_yuv_round_trip(tmp_path, small_clip):
    p = tmp_path / "x.yuv"
    write_yuv(small_clip, p)
    assert p.stat().st_size == len(small_clip) * frame_size_bytes(32, 32, "420", 8)
    back = read_video(p, width=32, height=32)
    for a, b in zip(small_clip.frames, back.frames):
        np.testing.assert_array_equal(a.y, b.y)
    with pytest.raises(TruncatedFrameError):
        p.write_bytes(p.read_bytes()[:-1])
        read_yuv(p, 32, 32)


def test_raw_yuv_needs_geometry(tmp_path):
    p = tmp_path / "x.yuv"
    p.write_bytes(bytes(96))
    with pytest.raises(ValueError):
        read_video(p)


def test_clip_rejects_out_of_range_samples():
    with pytest.raises(ValueError):
        clip_from_luma([np.full((4, 4), 2000, dtype=np.uint16)], bit_depth=10)


def test_planes_are_read_only(small_clip):
    with pytest.raises(ValueError):
        small_clip.frames[0].y[0, 0] = 1


def test_normalization_examples():
    zero = make_frame(np.zeros((4, 4), np.uint8))
    assert np.all(to_normalized_luma(zero) == 0.0)
    full = make_frame(np.full((4, 4), 255, np.uint8))
    assert np.all(to_normalized_luma(full) == 1.0)
    ten = make_frame(np.full((4, 4), 512, np.uint16), bit_depth=10)
    assert to_normalized_luma(ten, 10)[0, 0] == 512 / 1023


@pytest.mark.parametrize("depth", [8, 10])
def test_normalization_monotone_and_invertible(depth):
    peak = (1 << depth) - 1
    samples = np.arange(peak + 1, dtype=np.uint16 if depth > 8 else np.uint8).reshape(1, -1)
    norm = to_normalized_luma(make_frame(samples, "mono", depth), depth)
    assert norm[0, 0] == 0.0 and norm[0, -1] == 1.0
    assert np.all(np.diff(norm[0]) > 0)
    np.testing.assert_array_equal(from_normalized_luma(norm, depth), samples)


@settings(max_examples=25, deadline=None)
@given(w=st.integers(1, 9).map(lambda v: 2 * v), h=st.integers(1, 9).map(lambda v: 2 * v),
       n=st.integers(0, 3), chroma=st.sampled_from(["420", "422", "444", "mono"]),
       depth=st.sampled_from([8, 10]), seed=st.integers(0, 2 ** 16))
def test_read_write_read_idempotent(w, h, n, chroma, depth, seed):
    r = np.random.default_rng(seed)
    dt = np.uint8 if depth == 8 else np.uint16
    from tdp.video_io import chroma_shape

    ch, cw = chroma_shape(w, h, chroma)
    frames = [make_frame(r.integers(0, 1 << depth, (h, w)).astype(dt), chroma, depth,
                         r.integers(0, 1 << depth, (ch, cw)).astype(dt),
                         r.integers(0, 1 << depth, (ch, cw)).astype(dt)) for _ in range(n)]
    clip = Clip(tuple(frames), w, h, Fraction(24, 1), depth, chroma)
    once = read_y4m_bytes(y4m_bytes(clip))
    twice = read_y4m_bytes(y4m_bytes(once))
    assert y4m_bytes(once) == y4m_bytes(twice)
    for a, b in zip(clip.frames, twice.frames):
        for pa, pb in zip(a.planes, b.planes):
            np.testing.assert_array_equal(pa, pb)

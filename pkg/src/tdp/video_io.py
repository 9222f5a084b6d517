"""Raw video I/O: YUV4MPEG2 streams and headerless planar YUV.

Samples are kept as numpy arrays (uint8 for 8-bit, little-endian uint16 for
10-bit). A :class:`Clip` is immutable once built; its planes are marked
read-only so it can be shared freely between threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Iterable, Sequence

import numpy as np

Y4M_SIGNATURE = b"YUV4MPEG2"
FRAME_TAG = b"FRAME"

# Y4M colorspace token -> (chroma sampling, bit depth)
_COLORSPACES = {
    "420jpeg": ("420", 8),
    "420paldv": ("420", 8),
    "420mpeg2": ("420", 8),
    "420": ("420", 8),
    "422": ("422", 8),
    "444": ("444", 8),
    "mono": ("mono", 8),
    "420p10": ("420", 10),
    "422p10": ("422", 10),
    "444p10": ("444", 10),
    "mono10": ("mono", 10),
}

_CANONICAL_TOKEN = {
    ("420", 8): "420jpeg",
    ("422", 8): "422",
    ("444", 8): "444",
    ("mono", 8): "mono",
    ("420", 10): "420p10",
    ("422", 10): "422p10",
    ("444", 10): "444p10",
    ("mono", 10): "mono10",
}


class VideoFormatError(ValueError):
    """Malformed or truncated video data.

    ``offset`` is the byte position in the stream where the problem was found.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedFrameError(VideoFormatError):
    pass


def chroma_shape(width: int, height: int, chroma: str) -> tuple[int, int]:
    """(height, width) of each chroma plane for the given sampling."""
    if chroma == "420":
        return (height + 1) // 2, (width + 1) // 2
    if chroma == "422":
        return height, (width + 1) // 2
    if chroma == "444":
        return height, width
    if chroma == "mono":
        return 0, 0
    raise ValueError(f"unsupported chroma sampling {chroma!r}")


def frame_size_bytes(width: int, height: int, chroma: str, bit_depth: int) -> int:
    ch, cw = chroma_shape(width, height, chroma)
    bps = 1 if bit_depth <= 8 else 2
    return (width * height + 2 * ch * cw) * bps


def _dtype(bit_depth: int) -> np.dtype:
    return np.dtype(np.uint8) if bit_depth <= 8 else np.dtype("<u2")


@dataclass(frozen=True)
class Frame:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y, self.u, self.v


@dataclass(frozen=True)
class Clip:
    frames: tuple[Frame, ...]
    width: int
    height: int
    frame_rate: Fraction = Fraction(30, 1)
    bit_depth: int = 8
    chroma: str = "420"
    # Y4M header tokens other than W/H/F/C, kept verbatim (e.g. "Ip", "A1:1")
    extra_tags: tuple[str, ...] = ()
    # Original C token, or None when the header omitted it
    colorspace_token: str | None = field(default=None)

    def __post_init__(self):
        if self.bit_depth not in (8, 10):
            raise ValueError(f"bit depth must be 8 or 10, got {self.bit_depth}")
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "frame_rate", Fraction(self.frame_rate))
        ch, cw = chroma_shape(self.width, self.height, self.chroma)
        peak = (1 << self.bit_depth) - 1
        for i, f in enumerate(self.frames):
            for plane, shape in zip(f.planes, [(self.height, self.width), (ch, cw), (ch, cw)]):
                if plane.shape != shape:
                    raise ValueError(f"frame {i}: plane shape {plane.shape} != {shape}")
                if plane.size and int(plane.max()) > peak:
                    raise ValueError(f"frame {i}: sample exceeds {self.bit_depth}-bit range")
                plane.setflags(write=False)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def duration(self) -> float:
        """Duration in seconds."""
        return len(self.frames) / float(self.frame_rate)

    @property
    def peak(self) -> int:
        return (1 << self.bit_depth) - 1

    def with_frames(self, frames: Iterable[Frame]) -> "Clip":
        return Clip(
            frames=tuple(frames),
            width=self.width,
            height=self.height,
            frame_rate=self.frame_rate,
            bit_depth=self.bit_depth,
            chroma=self.chroma,
            extra_tags=self.extra_tags,
            colorspace_token=self.colorspace_token,
        )


def make_frame(y: np.ndarray, chroma: str = "420", bit_depth: int = 8,
               u: np.ndarray | None = None, v: np.ndarray | None = None) -> Frame:
    """Build a frame from a luma plane, filling missing chroma with mid-gray."""
    h, w = y.shape
    ch, cw = chroma_shape(w, h, chroma)
    dt = _dtype(bit_depth)
    mid = 1 << (bit_depth - 1)
    if u is None:
        u = np.full((ch, cw), mid, dtype=dt)
    if v is None:
        v = np.full((ch, cw), mid, dtype=dt)
    return Frame(np.ascontiguousarray(y, dtype=dt), np.ascontiguousarray(u, dtype=dt),
                 np.ascontiguousarray(v, dtype=dt))


def clip_from_luma(lumas: Sequence[np.ndarray], frame_rate=Fraction(30, 1),
                   bit_depth: int = 8, chroma: str = "420") -> Clip:
    """Clip whose luma planes are given as integer arrays; chroma is mid-gray."""
    if not lumas:
        raise ValueError("need at least one luma plane")
    h, w = lumas[0].shape
    frames = [make_frame(np.asarray(y), chroma, bit_depth) for y in lumas]
    return Clip(tuple(frames), w, h, Fraction(frame_rate), bit_depth, chroma)


# --- Y4M -----------------------------------------------------------------

def _parse_header(line: bytes, offset: int) -> dict:
    tokens = line.split(b" ")
    if tokens[0] != Y4M_SIGNATURE:
        raise VideoFormatError("missing YUV4MPEG2 signature", offset)
    info: dict = {"extra": []}
    pos = offset + len(Y4M_SIGNATURE) + 1
    for tok in tokens[1:]:
        if not tok:
            raise VideoFormatError("empty header token", pos)
        key, val = chr(tok[0]), tok[1:].decode("ascii", errors="replace")
        try:
            if key == "W":
                info["width"] = int(val)
            elif key == "H":
                info["height"] = int(val)
            elif key == "F":
                num, den = val.split(":")
                info["frame_rate"] = Fraction(int(num), int(den))
            elif key == "C":
                if val not in _COLORSPACES:
                    raise VideoFormatError(f"unsupported colorspace C{val}", pos)
                info["colorspace"] = val
            else:
                info["extra"].append(tok.decode("ascii"))
        except (ValueError, ZeroDivisionError) as exc:
            if isinstance(exc, VideoFormatError):
                raise
            raise VideoFormatError(f"bad header token {tok!r}", pos) from None
        pos += len(tok) + 1
    for req in ("width", "height"):
        if req not in info:
            raise VideoFormatError(f"header lacks {req[0].upper()} tag", offset)
    if info["width"] <= 0 or info["height"] <= 0:
        raise VideoFormatError("non-positive frame dimensions", offset)
    return info


def read_y4m_bytes(data: bytes) -> Clip:
    if not data:
        raise VideoFormatError("empty stream", 0)
    nl = data.find(b"\n")
    if nl < 0:
        raise VideoFormatError("unterminated header", len(data))
    info = _parse_header(data[:nl], 0)
    token = info.get("colorspace")
    chroma, depth = _COLORSPACES[token or "420jpeg"]
    w, h = info["width"], info["height"]
    ch, cw = chroma_shape(w, h, chroma)
    dt = _dtype(depth)
    bps = dt.itemsize
    fsize = frame_size_bytes(w, h, chroma, depth)

    frames = []
    pos = nl + 1
    while pos < len(data):
        eol = data.find(b"\n", pos)
        if eol < 0 or not data.startswith(FRAME_TAG, pos):
            raise VideoFormatError("expected FRAME marker", pos)
        # frame-level parameters are tolerated but not retained
        start = eol + 1
        if start + fsize > len(data):
            raise TruncatedFrameError(
                f"frame {len(frames)} truncated: need {fsize} bytes, have {len(data) - start}",
                start,
            )
        buf = np.frombuffer(data, dtype=dt, count=fsize // bps, offset=start)
        ny = w * h
        nc = ch * cw
        y = buf[:ny].reshape(h, w).copy()
        u = buf[ny:ny + nc].reshape(ch, cw).copy()
        v = buf[ny + nc:ny + 2 * nc].reshape(ch, cw).copy()
        if depth > 8 and max(int(y.max(initial=0)), int(u.max(initial=0)), int(v.max(initial=0))) >= 1 << depth:
            raise VideoFormatError(f"frame {len(frames)} has samples beyond {depth} bits", start)
        frames.append(Frame(y, u, v))
        pos = start + fsize
    return Clip(
        frames=tuple(frames),
        width=w,
        height=h,
        frame_rate=info.get("frame_rate", Fraction(25, 1)),
        bit_depth=depth,
        chroma=chroma,
        extra_tags=tuple(info["extra"]),
        colorspace_token=token,
    )


def read_y4m(path: str | os.PathLike) -> Clip:
    with open(path, "rb") as fh:
        return read_y4m_bytes(fh.read())


def y4m_header(clip: Clip) -> bytes:
    fr = clip.frame_rate
    parts = [Y4M_SIGNATURE.decode(), f"W{clip.width}", f"H{clip.height}",
             f"F{fr.numerator}:{fr.denominator}"]
    token = clip.colorspace_token
    if token is None and (clip.chroma, clip.bit_depth) != ("420", 8):
        token = _CANONICAL_TOKEN[(clip.chroma, clip.bit_depth)]
    # interlace/aspect tags go before C, X comments after it
    parts += [t for t in clip.extra_tags if not t.startswith("X")]
    if token is not None:
        parts.append(f"C{token}")
    parts += [t for t in clip.extra_tags if t.startswith("X")]
    return (" ".join(parts) + "\n").encode("ascii")


def _frame_bytes(frame: Frame, bit_depth: int) -> bytes:
    dt = _dtype(bit_depth)
    return b"".join(np.ascontiguousarray(p, dtype=dt).tobytes() for p in frame.planes)


def write_y4m_to(clip: Clip, fh: BinaryIO) -> None:
    fh.write(y4m_header(clip))
    for frame in clip.frames:
        fh.write(FRAME_TAG + b"\n")
        fh.write(_frame_bytes(frame, clip.bit_depth))


def y4m_bytes(clip: Clip) -> bytes:
    import io

    buf = io.BytesIO()
    write_y4m_to(clip, buf)
    return buf.getvalue()


def write_y4m(clip: Clip, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        write_y4m_to(clip, fh)


# --- headerless planar YUV ----------------------------------------------

def read_yuv(path: str | os.PathLike, width: int, height: int, *,
             frame_rate=Fraction(30, 1), bit_depth: int = 8, chroma: str = "420") -> Clip:
    """Read raw planar YUV; geometry must be supplied by the caller."""
    with open(path, "rb") as fh:
        data = fh.read()
    fsize = frame_size_bytes(width, height, chroma, bit_depth)
    if len(data) % fsize:
        whole = len(data) // fsize
        raise TruncatedFrameError(
            f"{len(data)} bytes is not a multiple of the {fsize}-byte frame size", whole * fsize
        )
    dt = _dtype(bit_depth)
    ch, cw = chroma_shape(width, height, chroma)
    ny, nc = width * height, ch * cw
    frames = []
    for i in range(len(data) // fsize):
        buf = np.frombuffer(data, dtype=dt, count=fsize // dt.itemsize, offset=i * fsize)
        frames.append(Frame(buf[:ny].reshape(height, width).copy(),
                            buf[ny:ny + nc].reshape(ch, cw).copy(),
                            buf[ny + nc:].reshape(ch, cw).copy()))
    return Clip(tuple(frames), width, height, Fraction(frame_rate), bit_depth, chroma)


def write_yuv(clip: Clip, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        for frame in clip.frames:
            fh.write(_frame_bytes(frame, clip.bit_depth))


def read_video(path: str | os.PathLike, **geometry) -> Clip:
    """Dispatch on extension: ``.y4m`` is self-describing, anything else is raw."""
    if str(path).lower().endswith(".y4m"):
        return read_y4m(path)
    if "width" not in geometry or "height" not in geometry:
        raise ValueError(f"{path}: raw YUV needs explicit width and height")
    return read_yuv(path, **geometry)


# --- normalization ------------------------------------------------------

def to_normalized_luma(frame: Frame, bit_depth: int = 8) -> np.ndarray:
    """Luma plane as float64 in [0, 1]: sample / (2**bit_depth - 1)."""
    return frame.y.astype(np.float64) / float((1 << bit_depth) - 1)


def from_normalized_luma(luma: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Inverse of :func:`to_normalized_luma` with clamping and rounding."""
    peak = (1 << bit_depth) - 1
    q = np.rint(np.clip(np.asarray(luma, dtype=np.float64), 0.0, 1.0) * peak)
    return q.astype(_dtype(bit_depth))

"""Stand-in codecs for hermetic ladder runs.

``lossless`` copies the Y4M stream byte for byte, so the decoded clip is the
input and the measured bitrate is the raw stream rate.

``noisy`` stores the input losslessly (zlib), zero-pads the container up to
the target size, and on decode adds Gaussian noise whose standard deviation
falls with bitrate: ``sigma = 8 * 1000 / kbps`` in 8-bit code values. The
noise seed is fixed by the bitrate and ``--seed``, so identical inputs give
identical outputs.

Usage::

    python -m tdp.evaluation.stub encode --mode noisy --bitrate 2500 IN.y4m OUT.stub
    python -m tdp.evaluation.stub decode OUT.stub DECODED.y4m
"""

from __future__ import annotations

import argparse
import json
import shutil
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"TDPSTUB\x01"
NOISE_REF_KBPS = 1000.0
NOISE_REF_SIGMA = 8.0


def noise_sigma(kbps: float, bit_depth: int = 8) -> float:
    return NOISE_REF_SIGMA * NOISE_REF_KBPS / kbps * (1 << (bit_depth - 8))


def encode_noisy(src: Path, dst: Path, kbps: float, seed: int = 0) -> None:
    from ..video_io import read_y4m_bytes

    raw = src.read_bytes()
    clip = read_y4m_bytes(raw)
    payload = zlib.compress(raw, 9)
    header = json.dumps({"kbps": kbps, "seed": seed, "payload": len(payload)}).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + payload
    target = int(round(kbps * 1000.0 * clip.duration / 8.0))
    dst.write_bytes(body + bytes(max(0, target - len(body))))


def decode_noisy(src: Path, dst: Path) -> None:
    from ..video_io import read_y4m_bytes, write_y4m

    data = src.read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{src}: not a noisy-stub stream")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + hlen])
    payload = data[start + hlen:start + hlen + header["payload"]]
    clip = read_y4m_bytes(zlib.decompress(payload))
    rng = np.random.default_rng([int(round(header["kbps"] * 1000)), int(header["seed"])])
    sigma = noise_sigma(header["kbps"], clip.bit_depth)
    frames = []
    for f in clip.frames:
        planes = []
        for p in f.planes:
            noisy = np.rint(p.astype(np.float64) + rng.normal(0.0, sigma, p.shape))
            planes.append(np.clip(noisy, 0, clip.peak).astype(p.dtype))
        frames.append(type(f)(*planes))
    write_y4m(clip.with_frames(frames), dst)


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="python -m tdp.evaluation.stub", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="action", required=True)
    enc = sub.add_parser("encode")
    enc.add_argument("--mode", choices=("lossless", "noisy"), default="lossless")
    enc.add_argument("--bitrate", type=float, required=True, help="target kbps")
    enc.add_argument("--seed", type=int, default=0)
    enc.add_argument("input", type=Path)
    enc.add_argument("output", type=Path)
    dec = sub.add_parser("decode")
    dec.add_argument("input", type=Path)
    dec.add_argument("output", type=Path)
    sub.add_parser("version")
    args = p.parse_args(argv)

    try:
        if args.action == "version":
            from .. import __version__
            print(f"tdp-stub {__version__}")
        elif args.action == "encode" and args.mode == "lossless":
            shutil.copyfile(args.input, args.output)
        elif args.action == "encode":
            if args.bitrate <= 0:
                p.error("--bitrate must be positive")
            encode_noisy(args.input, args.output, args.bitrate, args.seed)
        elif args.input.read_bytes()[:len(MAGIC)] == MAGIC:
            decode_noisy(args.input, args.output)
        else:
            shutil.copyfile(args.input, args.output)
    except (OSError, ValueError) as exc:
        print(f"stub: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Differentiable tensor substrate.

Tensors, convolution and reverse-mode gradients come from torch; this module
adds the contracts the rest of the package relies on: scalar-only backward,
a named parameter store with Adam, a finite-difference gradient checker, and
a small self-describing checkpoint container.

Convolution uses the cross-correlation convention (kernels are not flipped).
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"TDPCKPT\x00"
CHECKPOINT_VERSION = 1

_DTYPES = {
    "f32": (torch.float32, "<f4"),
    "f64": (torch.float64, "<f8"),
    "i64": (torch.int64, "<i8"),
    "u8": (torch.uint8, "u1"),
}
_DTYPE_NAMES = {v[0]: k for k, v in _DTYPES.items()}


class ContractError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def conv2d(input: Tensor, kernel: Tensor, padding: int = 0, stride: int = 1,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlate an N x C x H x W input with an O x C x k x k kernel."""
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {tuple(input.shape)}, {tuple(kernel.shape)}")
    if input.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {input.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if kernel.shape[2] > input.shape[2] + 2 * padding or kernel.shape[3] > input.shape[3] + 2 * padding:
        raise ShapeError("kernel larger than padded input")
    return F.conv2d(input, kernel, bias=bias, stride=stride, padding=padding)


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any parameter")
    loss.backward()


class ParamStore:
    """Named parameters plus Adam state.

    Parameters under a frozen prefix are skipped by :meth:`step`; every other
    parameter must have a gradient when stepping.
    """

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._frozen: set[str] = set()
        self._opt: torch.optim.Adam | None = None
        self._lr: float | None = None
        for name, p in (params or {}).items():
            self.register(name, p)

    @classmethod
    def from_modules(cls, modules: Mapping[str, torch.nn.Module]) -> "ParamStore":
        store = cls()
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters():
                store.register(f"{prefix}.{name}", p)
        return store

    def register(self, name: str, param: Tensor) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if self._opt is not None:
            raise ContractError("cannot register parameters after the first step")
        self._params[name] = param

    def freeze(self, prefix: str) -> None:
        self._frozen.update(n for n in self._params if n.startswith(prefix))

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if n not in self._frozen]

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def _optimizer(self, lr: float) -> torch.optim.Adam:
        if self._opt is None:
            self._opt = torch.optim.Adam(
                [p for _, p in self.trainable()], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, foreach=False
            )
        for group in self._opt.param_groups:
            group["lr"] = lr
        return self._opt

    def step(self, lr: float) -> None:
        missing = [n for n, p in self.trainable() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
        self._optimizer(lr).step()

    # optimizer state as flat named tensors, for checkpoints
    def optimizer_state(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self._opt is None:
            return out
        for name, p in self.trainable():
            st = self._opt.state.get(p)
            if not st:
                continue
            out[f"adam/{name}/exp_avg"] = st["exp_avg"].detach().clone()
            out[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().clone()
            out[f"adam/{name}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1).clone()
        return out

    def load_optimizer_state(self, tensors: Mapping[str, Tensor], lr: float) -> None:
        opt = self._optimizer(lr)
        for name, p in self.trainable():
            key = f"adam/{name}/exp_avg"
            if key not in tensors:
                continue
            for suffix in ("exp_avg", "exp_avg_sq"):
                t = tensors[f"adam/{name}/{suffix}"]
                if t.shape != p.shape:
                    raise CheckpointError(f"optimizer state {name}/{suffix}: shape {tuple(t.shape)} != {tuple(p.shape)}")
            opt.state[p] = {
                "step": tensors[f"adam/{name}/step"].reshape(()).clone(),
                "exp_avg": tensors[f"adam/{name}/exp_avg"].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"adam/{name}/exp_avg_sq"].to(p.dtype).clone(),
            }


def sgd_adam_step(store: ParamStore, lr: float) -> None:
    """One Adam update (betas 0.9/0.999, eps 1e-8) over the store."""
    store.step(lr)


# --- finite differences --------------------------------------------------

def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> list[float]:
    """Relative error between autograd and central differences, per input.

    ``fn`` maps float64 tensors to a scalar tensor. Inputs are perturbed one
    at a time with the others held fixed.
    """
    inputs = [t.detach().to(torch.float64).requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    backward(out)
    errors = []
    for k, t in enumerate(inputs):
        analytic = t.grad.detach().numpy().copy()

        def f(arr, k=k):
            args = [u.detach() for u in inputs]
            args[k] = torch.from_numpy(arr)
            with torch.no_grad():
                return float(fn(*args))

        numeric = finite_difference_grad(f, t.detach().numpy(), eps)
        errors.append(relative_error(analytic, numeric))
    return errors


# --- checkpoint container -----------------------------------------------

def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Write tensors as raw little-endian blobs behind a JSON index.

    Layout: magic (8 bytes), u32 format version, u64 header length, header
    JSON, then the concatenated blobs at the offsets the header records.
    """
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = _DTYPE_NAMES[t.dtype]
        raw = t.numpy().astype(_DTYPES[code][1], copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike,
                    expected_shapes: Mapping[str, Iterable[int]] | None = None) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(CHECKPOINT_MAGIC) + 12
    header = json.loads(data[start:start + hlen])
    base = start + hlen
    tensors: dict[str, Tensor] = {}
    for e in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(data, dtype=np_dtype, count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {tuple(tensors[name].shape)}, expected {tuple(shape)}"
                )
    return tensors, header["meta"]


def load_params(store: ParamStore, tensors: Mapping[str, Tensor]) -> None:
    """Copy checkpoint tensors into the store's parameters in place."""
    for name, p in store.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        t = tensors[name]
        if tuple(t.shape) != tuple(p.shape):
            raise CheckpointError(f"parameter {name}: shape {tuple(t.shape)} != {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(t.to(p.dtype))

"""Dense layers with hand-written backward passes.

Feature maps are ``(N, C, H, W)`` float arrays. Convolutions are stride-1,
zero "same" padding cross-correlations with odd kernels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patch matrix ``(kh * kw * C, N * H * W)`` with zero padding."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph : ph + h, pw : pw + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, n, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(kh * kw * c, n * h * w)


def _check_conv(x: np.ndarray, weight: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] % 2 == 0 or weight.shape[3] % 2 == 0:
        raise ValueError(f"expected odd (O, C, kh, kw) kernel, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}"
        )


def conv_forward(x, weight, bias):
    """Convolution that also returns the patch matrix for reuse in backward."""
    _check_conv(x, weight)
    n, _, h, w = x.shape
    o, c, kh, kw = weight.shape
    cols = _im2col(x, kh, kw)
    wmat = weight.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = wmat @ cols
    out += bias[:, None]
    return out.reshape(o, n, h, w).transpose(1, 0, 2, 3), cols


def conv_backward(cols, x_shape, weight, g_out, need_input_grad=True):
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    if g_out.shape != (n, o, h, w):
        raise ValueError(f"output gradient shape {g_out.shape} != {(n, o, h, w)}")
    g_mat = g_out.transpose(1, 0, 2, 3).reshape(o, n * h * w)
    g_b = g_mat.sum(axis=1)
    g_w = (g_mat @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
    g_x = None
    if need_input_grad:
        # adjoint of same-padded correlation: correlate with the flipped,
        # channel-swapped kernel
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        g_x, _ = conv_forward(g_out, np.ascontiguousarray(flipped), np.zeros(c, weight.dtype))
    return g_x, g_w, g_b


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return conv_forward(x, weight, bias)[0]


def conv2d_backward(x, weight, g_out):
    """Gradients of ``<g_out, conv2d(x, weight, bias)>``.

    Returns ``(g_x, g_weight, g_bias)``.
    """
    _check_conv(x, weight)
    cols = _im2col(x, weight.shape[2], weight.shape[3])
    return conv_backward(cols, x.shape, weight, g_out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, g_out, 0)


def space_to_depth(x: np.ndarray, r: int = 2) -> np.ndarray:
    """Fold ``r x r`` pixel blocks into channels.

    Output channel ``c * r * r + i * r + j`` holds input channel ``c`` at
    sub-pixel offset ``(i, j)``.
    """
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial dims {(h, w)} not divisible by {r}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(n, c * r * r, h // r, w // r)


def depth_to_space(x: np.ndarray, r: int = 2) -> np.ndarray:
    n, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by {r * r}")
    y = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(n, c // (r * r), h * r, w * r)


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamStore:
    """Ordered named parameters, each with gradient and Adam moment buffers.

    Not safe for concurrent mutation.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(np.asarray(value))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad.copy() for k, p in self._params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, p in self._params.items():
            q = out.add(k, p.value.copy())
            q.grad[...] = p.grad
            q.m[...] = p.m
            q.v[...] = p.v
        return out


def init_conv(store: ParamStore, name: str, in_ch: int, out_ch: int, k: int,
              rng: np.random.Generator, zero: bool = False, dtype=np.float64) -> None:
    """Register ``name.weight`` / ``name.bias``.

    Weights are uniform in ``+-1/sqrt(fan_in)``; ``zero`` makes the layer
    output exactly zero. Biases start at zero.
    """
    shape = (out_ch, in_ch, k, k)
    if zero:
        weight = np.zeros(shape, dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(in_ch * k * k)
        weight = rng.uniform(-bound, bound, size=shape).astype(dtype)
    store.add(f"{name}.weight", weight)
    store.add(f"{name}.bias", np.zeros(out_ch, dtype=dtype))


# ---------------------------------------------------------------------------
# IRIMCKPT checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"IRIMCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParamStore, header: dict[str, str] | None = None) -> None:
    """Write params and Adam moments to ``path``.

    Layout (little endian): magic, u32 version, u32 header length + UTF-8
    ``key=value`` lines, u32 entry count, then per entry the name (u32 length
    + UTF-8), u32 rank, u32 dims, and float64 value, m and v tensors.
    """
    text = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text]
    chunks.append(struct.pack("<I", len(store)))
    for name, p in store.items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        for t in (p.value, p.m, p.v):
            chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, dtype=np.float64) -> tuple[ParamStore, dict[str, str]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an IRIMCKPT file")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    version, hlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = {}
    for line in take(hlen).decode().splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    (count,) = struct.unpack("<I", take(4))
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        tensors = [
            np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(dtype)
            for _ in range(3)
        ]
        p = store.add(name, tensors[0])
        p.m[...] = tensors[1]
        p.v[...] = tensors[2]
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return store, header

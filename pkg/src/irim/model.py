"""Invertible recurrent inference machine.

The machine state is a real ``(N, 2K + D, H, W)`` array. Channels ``2k`` and
``2k + 1`` hold the real and imaginary part of the estimate for coil ``k``;
the remaining ``D`` channels are the latent memory.

One step is a chain of additive couplings. The first one updates the latent
channels from the estimate and the data-consistency gradient; since the
estimate channels pass through it unchanged, the gradient can be recomputed
from the output when inverting. After it comes a multiscale stack: for every
scale a 2x space-to-depth followed by a coupling pair, then the mirrored
ascent.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import _rng, mri
from .nn import ParamStore, conv_backward, conv_forward, depth_to_space, init_conv, space_to_depth

DOWN = "down"
UP = "up"
INJECT = "inject"


@dataclass(frozen=True)
class ModelConfig:
    steps: int = 4
    scales: int = 2
    latent_channels: int = 16
    layers_per_block: int = 2
    # hidden width per scale; entry 0 is the full-resolution gradient coupling
    channels_per_scale: tuple[int, ...] = (16, 16, 16)
    coil_count: int = 1
    head_channels: int = 16
    head_layers: int = 2
    kernel_size: int = 3
    shared_weights: bool = True

    @property
    def estimate_channels(self) -> int:
        return 2 * self.coil_count

    @property
    def state_channels(self) -> int:
        return 2 * self.coil_count + self.latent_channels

    @property
    def divisor(self) -> int:
        return 2**self.scales

    def validate(self) -> "ModelConfig":
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.latent_channels < mri.AcquisitionMeta.ONE_HOT_WIDTH:
            raise ValueError(
                f"latent_channels must hold the {mri.AcquisitionMeta.ONE_HOT_WIDTH}-slot one-hot code"
            )
        if self.state_channels % 2:
            raise ValueError("2 * coil_count + latent_channels must be even")
        if self.layers_per_block < 2 or self.head_layers < 2:
            raise ValueError("residual nets and head need at least 2 layers")
        if len(self.channels_per_scale) != self.scales + 1:
            raise ValueError(
                f"channels_per_scale needs {self.scales + 1} entries, got {len(self.channels_per_scale)}"
            )
        if min(self.channels_per_scale) < 1 or self.head_channels < 1:
            raise ValueError("hidden widths must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.coil_count < 1:
            raise ValueError("coil_count must be >= 1")
        return self

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            out[f.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name == "channels_per_scale":
                kw[f.name] = tuple(int(v) for v in str(raw).split(","))
            elif f.name == "shared_weights":
                kw[f.name] = parse_bool(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


def parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass(frozen=True)
class Preset:
    model: ModelConfig
    image_size: int
    large: bool = False


PRESETS = {
    "desk-single": Preset(ModelConfig(steps=4, scales=2, latent_channels=16, coil_count=1), 64),
    "desk-multi": Preset(ModelConfig(steps=4, scales=2, latent_channels=16, coil_count=4), 64),
    "paper-single": Preset(
        ModelConfig(steps=8, scales=12, latent_channels=64, layers_per_block=5,
                    channels_per_scale=(64,) * 13, coil_count=1, head_channels=64),
        368, large=True,
    ),
    "paper-multi": Preset(
        ModelConfig(steps=8, scales=12, latent_channels=96, layers_per_block=5,
                    channels_per_scale=(64,) * 13, coil_count=15, head_channels=64),
        368, large=True,
    ),
}


@dataclass(frozen=True)
class Coupling:
    """One additive coupling: ``x[updated] += R(x[fixed] (+) cond)``."""

    name: str
    kind: str  # INJECT, "a" or "b"
    channels: int
    hidden: int
    estimate_channels: int = 0

    @property
    def updated(self) -> slice:
        half = self.channels // 2
        if self.kind == INJECT:
            return slice(self.estimate_channels, self.channels)
        return slice(0, half) if self.kind == "a" else slice(half, self.channels)

    @property
    def fixed(self) -> slice:
        half = self.channels // 2
        if self.kind == INJECT:
            return slice(0, self.estimate_channels)
        return slice(half, self.channels) if self.kind == "a" else slice(0, half)

    @property
    def in_channels(self) -> int:
        n = self.fixed.stop - self.fixed.start
        return 2 * n if self.kind == INJECT else n

    @property
    def out_channels(self) -> int:
        return self.updated.stop - self.updated.start


def plan(cfg: ModelConfig) -> list:
    """Ordered ops of one step: :class:`Coupling` instances, ``DOWN`` and ``UP``."""
    c = cfg.state_channels
    ops: list = [Coupling(INJECT, INJECT, c, cfg.channels_per_scale[0], cfg.estimate_channels)]
    for j in range(1, cfg.scales + 1):
        ops.append(DOWN)
        ch = c * 4**j
        hid = cfg.channels_per_scale[j]
        ops += [Coupling(f"down{j}.a", "a", ch, hid), Coupling(f"down{j}.b", "b", ch, hid)]
    for j in range(cfg.scales, 0, -1):
        ch = c * 4**j
        hid = cfg.channels_per_scale[j]
        ops += [Coupling(f"up{j}.a", "a", ch, hid), Coupling(f"up{j}.b", "b", ch, hid)]
        ops.append(UP)
    return ops


def step_prefix(cfg: ModelConfig, t: int) -> str:
    return "step." if cfg.shared_weights else f"step{t}."


def init_params(cfg: ModelConfig, seed: int = 0, zero_final: bool = True,
                dtype=np.float64) -> ParamStore:
    """Fresh parameters.

    With ``zero_final`` the last conv of every coupling is zero, so each step
    starts as the identity map.
    """
    cfg.validate()
    rng = _rng.stream(seed, _rng.INIT)
    store = ParamStore()
    k = cfg.kernel_size
    n_step_sets = 1 if cfg.shared_weights else cfg.steps
    for t in range(n_step_sets):
        prefix = step_prefix(cfg, t)
        for op in plan(cfg):
            if not isinstance(op, Coupling):
                continue
            widths = [op.in_channels] + [op.hidden] * (cfg.layers_per_block - 1) + [op.out_channels]
            for i in range(cfg.layers_per_block):
                last = i == cfg.layers_per_block - 1
                init_conv(store, f"{prefix}{op.name}.conv{i}", widths[i], widths[i + 1], k, rng,
                          zero=zero_final and last, dtype=dtype)
    widths = [cfg.state_channels] + [cfg.head_channels] * (cfg.head_layers - 1) + [2]
    for i in range(cfg.head_layers):
        init_conv(store, f"head.conv{i}", widths[i], widths[i + 1], k, rng, dtype=dtype)
    return store


# ---------------------------------------------------------------------------
# conv stacks
# ---------------------------------------------------------------------------


def convnet_forward(x, params: ParamStore, key: str, layers: int, keep: bool = False):
    """``conv -> relu -> ... -> conv``. Returns ``(out, cache)``."""
    cache = []
    h = x
    for i in range(layers):
        w = params[f"{key}.conv{i}.weight"].value
        b = params[f"{key}.conv{i}.bias"].value
        pre, cols = conv_forward(h, w, b)
        if keep:
            cache.append((cols, h.shape, pre))
        h = np.maximum(pre, 0) if i < layers - 1 else pre
    return h, cache


def convnet_backward(cache, params: ParamStore, key: str, g_out, need_input_grad=True):
    """Accumulate parameter gradients; return the input gradient."""
    g = g_out
    layers = len(cache)
    for i in reversed(range(layers)):
        cols, x_shape, pre = cache[i]
        if i < layers - 1:
            g = np.where(pre > 0, g, 0)
        w = params[f"{key}.conv{i}.weight"]
        b = params[f"{key}.conv{i}.bias"]
        g, g_w, g_b = conv_backward(cols, x_shape, w.value, g, need_input_grad or i > 0)
        w.grad += g_w
        b.grad += g_b
    return g


# ---------------------------------------------------------------------------
# complex <-> channel packing
# ---------------------------------------------------------------------------


def to_channels(z: np.ndarray) -> np.ndarray:
    """``(N, K, H, W)`` complex -> ``(N, 2K, H, W)`` real, (re, im) interleaved."""
    n, k, h, w = z.shape
    return np.stack([z.real, z.imag], axis=2).reshape(n, 2 * k, h, w)


def to_complex(x: np.ndarray) -> np.ndarray:
    return x[:, 0::2] + 1j * x[:, 1::2]


def data_gradient(estimate: np.ndarray, d: np.ndarray, mask) -> np.ndarray:
    """Data-consistency gradient of the estimate channels, as channels."""
    return to_channels(mri.dc_gradient(d, mask, to_complex(estimate)).astype(d.dtype, copy=False))


def data_gradient_adjoint(g_cond: np.ndarray, mask) -> np.ndarray:
    """Backprop through :func:`data_gradient` (a symmetric linear map)."""
    return to_channels(mri.normal_op(to_complex(g_cond), mask))


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def meta_indices(meta, n: int) -> np.ndarray:
    if isinstance(meta, mri.AcquisitionMeta):
        idx = [meta.one_hot_index] * n
    elif np.isscalar(meta):
        idx = [int(meta)] * n
    else:
        idx = [m.one_hot_index if isinstance(m, mri.AcquisitionMeta) else int(m) for m in meta]
    idx = np.asarray(idx, dtype=int)
    if idx.shape != (n,):
        raise ValueError(f"expected {n} meta entries, got {idx.shape[0]}")
    if idx.min() < 0 or idx.max() >= mri.AcquisitionMeta.ONE_HOT_WIDTH:
        raise ValueError(f"meta one-hot index out of [0, {mri.AcquisitionMeta.ONE_HOT_WIDTH})")
    return idx


def _as_batch(d: np.ndarray) -> np.ndarray:
    if d.ndim == 3:
        return d[None]
    if d.ndim != 4:
        raise ValueError(f"expected k-space (N, K, H, W), got shape {d.shape}")
    return d


def init_state(d: np.ndarray, mask, meta, cfg: ModelConfig) -> np.ndarray:
    """Zero-filled estimate plus a one-hot latent code."""
    d = _as_batch(d)
    n, k, h, w = d.shape
    if k != cfg.coil_count:
        raise ValueError(f"data has {k} coils, model expects {cfg.coil_count}")
    idx = meta_indices(meta, n)
    estimate = to_channels(mri.zero_filled(d, mask))
    state = np.zeros((n, cfg.state_channels, h, w), dtype=estimate.dtype)
    state[:, : 2 * k] = estimate
    state[np.arange(n), 2 * k + idx] = 1
    return state


def _check_state(state: np.ndarray, cfg: ModelConfig) -> None:
    if state.ndim != 4 or state.shape[1] != cfg.state_channels:
        raise ValueError(f"state shape {state.shape} does not match {cfg.state_channels} channels")
    h, w = state.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ValueError(
            f"spatial dims {(h, w)} not divisible by 2**scales = {cfg.divisor}"
        )


# ---------------------------------------------------------------------------
# couplings and steps
# ---------------------------------------------------------------------------


def residual(x_fixed, cond, op: Coupling, params, prefix, cfg, keep=False):
    if op.kind == INJECT:
        if cond is None:
            raise ValueError("gradient-injection coupling needs its conditioning input")
        inp = np.concatenate([x_fixed, cond], axis=1)
    else:
        inp = x_fixed
    return convnet_forward(inp, params, prefix + op.name, cfg.layers_per_block, keep)


def coupling_forward(x, op: Coupling, params, prefix, cfg, cond=None):
    r, _ = residual(x[:, op.fixed], cond, op, params, prefix, cfg)
    y = x.copy()
    y[:, op.updated] += r
    return y


def coupling_inverse(y, op: Coupling, params, prefix, cfg, cond=None):
    r, _ = residual(y[:, op.fixed], cond, op, params, prefix, cfg)
    x = y.copy()
    x[:, op.updated] -= r
    return x


def step_forward(state, d, mask, params, cfg: ModelConfig, t: int = 0):
    """One update of the machine state."""
    _check_state(state, cfg)
    d = _as_batch(d)
    prefix = step_prefix(cfg, t)
    x = state
    for op in plan(cfg):
        if op == DOWN:
            x = space_to_depth(x)
        elif op == UP:
            x = depth_to_space(x)
        else:
            cond = data_gradient(x[:, op.fixed], d, mask) if op.kind == INJECT else None
            x = coupling_forward(x, op, params, prefix, cfg, cond)
    return x


def step_inverse(state, d, mask, params, cfg: ModelConfig, t: int = 0):
    """Recover the input of :func:`step_forward` from its output."""
    _check_state(state, cfg)
    d = _as_batch(d)
    prefix = step_prefix(cfg, t)
    y = state
    for op in reversed(plan(cfg)):
        if op == DOWN:
            y = depth_to_space(y)
        elif op == UP:
            y = space_to_depth(y)
        else:
            cond = data_gradient(y[:, op.fixed], d, mask) if op.kind == INJECT else None
            y = coupling_inverse(y, op, params, prefix, cfg, cond)
    return y


def output_head(state, params, cfg: ModelConfig, keep: bool = False):
    """Non-invertible conv stack to one complex image ``(N, H, W)``."""
    out, cache = convnet_forward(state, params, "head", cfg.head_layers, keep)
    return out[:, 0] + 1j * out[:, 1], cache


def output_head_backward(cache, params, cfg: ModelConfig, g_image: np.ndarray):
    """``g_image`` is the complex gradient ``dL/dRe + i dL/dIm``."""
    g = np.stack([g_image.real, g_image.imag], axis=1)
    return convnet_backward(cache, params, "head", g)


def magnitude(z: np.ndarray) -> np.ndarray:
    return np.abs(z)


def magnitude_backward(z: np.ndarray, g_m: np.ndarray) -> np.ndarray:
    """Complex gradient of ``sum(g_m * |z|)``; zero where ``z == 0``."""
    mag = np.abs(z)
    safe = np.where(mag > 0, mag, 1)
    return np.where(mag > 0, g_m * z / safe, 0)


def run_model(d, mask, meta, params, cfg: ModelConfig):
    """Reconstruct magnitude images. Returns ``(m_hat, final_state)``."""
    state = init_state(d, mask, meta, cfg)
    for t in range(cfg.steps):
        state = step_forward(state, d, mask, params, cfg, t)
    p_hat, _ = output_head(state, params, cfg)
    return magnitude(p_hat), state

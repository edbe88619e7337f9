"""Self-check suite behind ``irim check``.

Each check returns a :class:`CheckResult` with its measured values; the CLI
prints them as ``key=value`` lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backprop, metrics, mri, nn
from .model import ModelConfig, init_params, init_state, run_model, step_inverse


@dataclass
class CheckResult:
    name: str
    passed: bool
    values: dict[str, object] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"{self.name}.{k}={_fmt(v)}" for k, v in self.values.items()]
        out.append(f"{self.name}.status={'pass' if self.passed else 'FAIL'}")
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)


def _cplx(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _vdot(a, b) -> complex:
    return complex(np.vdot(b, a))  # <a, b> = sum a * conj(b)


def check_fft_unitarity(seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for h in (4, 8, 16, 17):
        for w in (4, 8, 16, 17):
            x = _cplx(rng, (h, w))
            worst = max(worst, abs(np.linalg.norm(mri.fft2c(x)) / np.linalg.norm(x) - 1))
    return CheckResult("fft_unitarity", worst < 1e-12, {"max_rel_err": worst})


def check_adjointness(seed=0, size=16) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in (1, 3, 15):
        for trial in range(20):
            mask = mri.make_mask(size, 4, seed * 1000 + trial)
            x = _cplx(rng, (k, size, size))
            y = _cplx(rng, (k, size, size))
            lhs = _vdot(mri.forward_op(x, mask), y)
            rhs = _vdot(x, mri.adjoint_op(y, mask))
            worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return CheckResult("adjointness", worst < 1e-10, {"max_rel_err": worst})


def check_mask_center() -> CheckResult:
    n4 = mri.make_mask(368, 4, 0).num_center
    n8 = mri.make_mask(368, 8, 0).num_center
    m4 = mri.make_mask(368, 4, 0).kept
    pad = (368 - n4 + 1) // 2
    ok = n4 == 29 and n8 == 15 and bool(m4[pad : pad + n4].all())
    return CheckResult("mask_center", ok, {"center_4x": n4, "center_8x": n8})


def check_conv_gradient(seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    g = rng.standard_normal((2, 4, 6, 5))
    gx, gw, gb = nn.conv2d_backward(x, w, g)
    h = 1e-6
    worst = 0.0
    for arr, grad in ((x, gx), (w, gw), (b, gb)):
        for _ in range(10):
            idx = tuple(rng.integers(s) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            fp = np.sum(g * nn.conv2d(x, w, b))
            arr[idx] = orig - h
            fm = np.sum(g * nn.conv2d(x, w, b))
            arr[idx] = orig
            worst = max(worst, backprop.relative_error(grad[idx], (fp - fm) / (2 * h)))
    return CheckResult("conv_gradient", worst < 1e-7, {"max_rel_err": worst})


def _problem(cfg: ModelConfig, size: int, n: int, seed: int, accel=4):
    rng = np.random.default_rng(seed)
    p = _cplx(rng, (n, cfg.coil_count, size, size))
    masks = np.stack([mri.make_mask(size, accel, seed + i).kept for i in range(n)])
    d = mri.forward_op(p, masks)
    target = np.abs(p).mean(axis=1) + 0.1
    meta = rng.integers(0, 4, n)
    return d, masks, meta, target


def _random_params(cfg, seed):
    return init_params(cfg, seed, zero_final=False)


def check_trajectory_roundtrip(seed=0) -> CheckResult:
    cfg = ModelConfig(steps=8, scales=3, latent_channels=8, channels_per_scale=(8, 8, 8, 8),
                      coil_count=1, head_channels=8)
    params = _random_params(cfg, seed)
    d, masks, meta, _ = _problem(cfg, 16, 2, seed)
    _, final = run_model(d, masks, meta, params, cfg)
    s = final
    for t in reversed(range(cfg.steps)):
        s = step_inverse(s, d, masks, params, cfg, t)
    err = float(np.max(np.abs(s - init_state(d, masks, meta, cfg))))
    return CheckResult("trajectory_roundtrip", err < 1e-8, {"max_abs_err": err})


def gradient_deviation(cfg: ModelConfig, size: int, seed: int, sabotage: bool = False):
    """Max relative gradient deviation between the two engines, plus both reports."""
    params = _random_params(cfg, seed)
    d, masks, meta, target = _problem(cfg, size, 2, seed)
    _, final = run_model(d, masks, meta, params, cfg)
    params.zero_grad()
    rev = backprop.backward_reversible(final, target, d, masks, meta, params, cfg, verify=True)
    g_rev = params.grads()
    params.zero_grad()
    sto = backprop.backward_stored(d, masks, meta, params, cfg, target)
    g_sto = params.grads()
    if sabotage:
        g_sto = {k: -v for k, v in g_sto.items()}
    dev = 0.0
    for k in g_rev:
        scale = float(np.max(np.abs(g_sto[k])))
        if scale > 0:
            dev = max(dev, float(np.max(np.abs(g_rev[k] - g_sto[k]))) / scale)
        else:
            dev = max(dev, float(np.max(np.abs(g_rev[k]))))
    return dev, rev, sto


def check_gradient_equivalence(seed=0, sabotage=False) -> CheckResult:
    worst = 0.0
    configs = [
        ModelConfig(steps=1, scales=1, latent_channels=8, channels_per_scale=(6, 6), coil_count=1,
                    head_channels=6),
        ModelConfig(steps=2, scales=2, latent_channels=8, channels_per_scale=(6, 6, 6), coil_count=2,
                    head_channels=6, shared_weights=False),
        ModelConfig(steps=4, scales=2, latent_channels=10, channels_per_scale=(6, 6, 6), coil_count=1,
                    head_channels=6),
        ModelConfig(steps=3, scales=3, latent_channels=8, channels_per_scale=(4, 4, 4, 4), coil_count=1,
                    head_channels=4, layers_per_block=3),
    ]
    for i, cfg in enumerate(configs):
        dev, _, _ = gradient_deviation(cfg, 16, seed + i, sabotage)
        worst = max(worst, dev)
    return CheckResult("gradient_equivalence", worst < 1e-6, {"max_rel_dev": worst, "configs": len(configs)})


def check_memory(seed=0) -> CheckResult:
    values = {}
    for steps in (2, 16):
        cfg = ModelConfig(steps=steps, scales=1, latent_channels=8, channels_per_scale=(4, 4),
                          coil_count=1, head_channels=4)
        _, rev, sto = gradient_deviation(cfg, 8, seed)
        values[f"reversible.T{steps}"] = rev.peak_cached_states
        values[f"stored.T{steps}"] = sto.peak_cached_states
    ok = (values["reversible.T2"] == values["reversible.T16"] <= 3
          and values["stored.T16"] > values["stored.T2"])
    return CheckResult("peak_cached_states", ok, values)


def check_pipeline_fd(seed=0) -> CheckResult:
    cfg = ModelConfig(steps=2, scales=2, latent_channels=8, channels_per_scale=(6, 6, 6), coil_count=2,
                      head_channels=6)
    params = _random_params(cfg, seed)
    d, masks, meta, target = _problem(cfg, 16, 2, seed)
    _, final = run_model(d, masks, meta, params, cfg)
    params.zero_grad()
    backprop.backward_reversible(final, target, d, masks, meta, params, cfg)
    rng = np.random.default_rng(seed)
    names = list(params)
    coords = []
    for _ in range(10):
        name = names[rng.integers(len(names))]
        coords.append((name, tuple(rng.integers(s) for s in params[name].value.shape)))
    res = backprop.finite_diff_check(
        params, coords, 1e-6,
        lambda: backprop.pipeline_loss(d, masks, meta, target, params, cfg),
    )
    return CheckResult("pipeline_fd", res.max_rel_err < 1e-5, {"max_rel_err": res.max_rel_err})


def check_ssim(seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.random((24, 24))
    y = rng.random((24, 24))
    cfg = metrics.SSIMConfig()
    self_val = metrics.ssim(x, x, cfg)
    one = metrics.SSIMConfig(data_range=1.0)
    const = metrics.ssim(np.zeros((16, 16)), np.ones((16, 16)), one)
    c1 = 0.01**2
    const_err = abs(const - c1 / (1 + c1))
    g = metrics.ssim_grad(x, y, cfg)
    h = 1e-6
    worst = 0.0
    for _ in range(10):
        idx = tuple(rng.integers(24, size=2))
        orig = x[idx]
        x[idx] = orig + h
        fp = metrics.ssim(x, y, cfg)
        x[idx] = orig - h
        fm = metrics.ssim(x, y, cfg)
        x[idx] = orig
        worst = max(worst, backprop.relative_error(g[idx], (fp - fm) / (2 * h)))
    ok = self_val == 1.0 and const_err < 1e-9 and worst < 1e-6
    return CheckResult("ssim", ok, {"self": self_val, "const_err": const_err, "grad_rel_err": worst})


ALL_CHECKS = (
    check_fft_unitarity,
    check_adjointness,
    check_mask_center,
    check_conv_gradient,
    check_ssim,
    check_trajectory_roundtrip,
    check_gradient_equivalence,
    check_memory,
    check_pipeline_fd,
)


def run_all(sabotage: str | None = None) -> list[CheckResult]:
    results = []
    for check in ALL_CHECKS:
        if check is check_gradient_equivalence:
            results.append(check(sabotage=sabotage == "store-grad"))
        else:
            results.append(check())
    return results

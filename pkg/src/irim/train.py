"""Training loop, optimizer and evaluation."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _rng, metrics, mri
from .backprop import backward_reversible
from .model import ModelConfig, init_params, parse_bool, run_model
from .nn import ParamStore, load_checkpoint, save_checkpoint
from .phantom import DatasetRecord, rss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 10.0
    decay_every: int = 30  # epochs

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.decay_every < 1 or self.decay_factor <= 0:
            raise ValueError("invalid learning-rate decay")


def learning_rate(cfg: OptimConfig, epoch: int) -> float:
    return cfg.lr * cfg.decay_factor ** -(epoch // cfg.decay_every)


def adam_step(store: ParamStore, cfg: OptimConfig, t: int, epoch: int = 0) -> float:
    """One bias-corrected Adam update using the accumulated gradients.

    ``t`` is the 1-based update count. Returns the learning rate used.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    lr = learning_rate(cfg, epoch)
    c1 = 1 - cfg.beta1**t
    c2 = 1 - cfg.beta2**t
    for _, p in store.items():
        p.m *= cfg.beta1
        p.m += (1 - cfg.beta1) * p.grad
        p.v *= cfg.beta2
        p.v += (1 - cfg.beta2) * p.grad * p.grad
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + cfg.eps)
    return lr


@dataclass(frozen=True)
class TrainConfig:
    image_size: int = 64
    batch_size: int = 4
    epochs: int = 1
    max_steps: int = 0  # 0: no step budget, run all epochs
    accelerations: tuple[int, ...] = (4, 8)
    seed: int = 0
    dtype: str = "float64"
    identity_init: bool = True  # zero the last conv of every coupling

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.max_steps < 0:
            raise ValueError("batch_size and epochs must be >= 1, max_steps >= 0")
        if not self.accelerations:
            raise ValueError("need at least one acceleration")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


def _fields_to_dict(obj) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, bool):
            v = str(v).lower()
        out[f.name] = repr(v) if isinstance(v, float) else str(v)
    return out


def _fields_from_dict(cls, d: dict[str, str]):
    kw = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        raw = d[f.name]
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if "tuple" in kind:
            kw[f.name] = tuple(int(v) for v in str(raw).split(",") if v)
        elif kind == "bool":
            kw[f.name] = parse_bool(raw)
        elif kind == "int":
            kw[f.name] = int(raw)
        elif kind == "float":
            kw[f.name] = float(raw)
        else:
            kw[f.name] = str(raw)
    return cls(**kw)


def optim_from_dict(d):
    return _fields_from_dict(OptimConfig, d)


def train_from_dict(d):
    return _fields_from_dict(TrainConfig, d)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    kspace: np.ndarray  # (N, K, H, W) undersampled
    masks: np.ndarray  # (N, W)
    targets: np.ndarray  # (N, H, W)
    meta: np.ndarray  # (N,) one-hot indices
    accels: np.ndarray  # (N,)


def prepare_batch(records: list[DatasetRecord], size: int, accels, mask_seeds,
                  dtype="float64") -> Batch:
    """Crop/pad each record to ``size`` and simulate its undersampled k-space."""
    cdtype = np.complex128 if dtype == "float64" else np.complex64
    ks, ms, ts, meta = [], [], [], []
    for rec, accel, seed in zip(records, accels, mask_seeds):
        images = mri.center_crop_or_pad(mri.ifft2c(rec.kdata), size, size)
        mask = mri.make_mask(size, int(accel), int(seed))
        ks.append(mri.forward_op(images, mask))
        ms.append(mask.kept)
        ts.append(mri.center_crop_or_pad(rec.target(), size, size))
        meta.append(rec.meta.one_hot_index)
    return Batch(
        np.stack(ks).astype(cdtype),
        np.stack(ms),
        np.stack(ts).astype(dtype),
        np.asarray(meta),
        np.asarray(accels, dtype=int),
    )


def zero_filled_magnitude(batch: Batch) -> np.ndarray:
    images = mri.zero_filled(batch.kspace, batch.masks)
    return rss(images)


def _batch_plan(n_records: int, cfg: TrainConfig, step: int):
    """Record indices, accelerations and mask seeds for global step ``step``."""
    per_epoch = n_records // cfg.batch_size
    epoch, pos = divmod(step, per_epoch)
    order = _rng.stream(cfg.seed, _rng.SHUFFLE, epoch).permutation(n_records)
    idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
    accels, seeds = [], []
    for j in range(cfg.batch_size):
        rng = _rng.stream(cfg.seed, _rng.ITEM, epoch, pos * cfg.batch_size + j)
        accels.append(int(cfg.accelerations[rng.integers(len(cfg.accelerations))]))
        seeds.append(int(rng.integers(2**62)))
    return epoch, idx, accels, seeds


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------

LOG_HEADER = "epoch,step,split,accel,nmse,psnr,ssim"


def format_metrics(epoch, step, split, accel, nmse, psnr, ssim) -> str:
    return f"{epoch},{step},{split},{accel},{nmse:.6g},{psnr:.6g},{ssim:.6g}"


def parse_metrics_line(line: str) -> dict:
    parts = line.strip().split(",")
    if len(parts) != 7:
        raise ValueError(f"malformed metrics line: {line!r}")
    epoch, step, split, accel, n, p, s = parts
    return {
        "epoch": int(epoch), "step": int(step), "split": split, "accel": int(accel),
        "nmse": float(n), "psnr": float(p), "ssim": float(s),
    }


def item_metrics(m_hat: np.ndarray, target: np.ndarray, ssim_cfg=metrics.SSIMConfig()):
    return (
        metrics.nmse(m_hat, target),
        metrics.psnr(m_hat, target),
        metrics.ssim(m_hat, target, ssim_cfg),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    step: int
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def checkpoint_header(model_cfg: ModelConfig, optim_cfg: OptimConfig, train_cfg: TrainConfig,
                      step: int) -> dict[str, str]:
    header = {"format": "irim-checkpoint", "step": str(step)}
    header.update({f"model.{k}": v for k, v in model_cfg.to_dict().items()})
    header.update({f"optim.{k}": v for k, v in _fields_to_dict(optim_cfg).items()})
    header.update({f"train.{k}": v for k, v in _fields_to_dict(train_cfg).items()})
    return header


def split_header(header: dict[str, str]):
    groups = {"model": {}, "optim": {}, "train": {}}
    for k, v in header.items():
        group, _, name = k.partition(".")
        if group in groups:
            groups[group][name] = v
    return (
        ModelConfig.from_dict(groups["model"]),
        optim_from_dict(groups["optim"]),
        train_from_dict(groups["train"]),
        int(header.get("step", 0)),
    )


def load_model(path):
    """Returns ``(params, model_cfg, optim_cfg, train_cfg, step)``."""
    _, header = load_checkpoint(path)
    model_cfg, optim_cfg, train_cfg, step = split_header(header)
    store, _ = load_checkpoint(path, dtype=np.dtype(train_cfg.dtype))
    return store, model_cfg, optim_cfg, train_cfg, step


def _atomic_save(path, store, header):
    tmp = Path(f"{path}.tmp")
    save_checkpoint(tmp, store, header)
    os.replace(tmp, path)


def train(records: list[DatasetRecord], model_cfg: ModelConfig, optim_cfg: OptimConfig,
          train_cfg: TrainConfig, *, params: ParamStore | None = None, start_step: int = 0,
          checkpoint: str | os.PathLike | None = None, metrics_log=None,
          val_records: list[DatasetRecord] | None = None,
          ssim_cfg: metrics.SSIMConfig = metrics.SSIMConfig()) -> TrainResult:
    """Optimize the model on ``records``.

    Everything a step does is a pure function of ``(train_cfg.seed, step)``,
    so resuming from a checkpoint written after step ``s`` with
    ``start_step=s`` continues exactly where the original run would have.
    ``metrics_log`` is a writable text stream.
    """
    model_cfg.validate()
    if not records:
        raise ValueError("empty training set")
    size = train_cfg.image_size
    if size % model_cfg.divisor:
        raise ValueError(f"image size {size} not divisible by 2**scales = {model_cfg.divisor}")
    for i, rec in enumerate(records):
        if rec.coils != model_cfg.coil_count:
            raise ValueError(
                f"record {i} has {rec.coils} coils, model expects {model_cfg.coil_count}"
            )
    per_epoch = len(records) // train_cfg.batch_size
    if per_epoch == 0:
        raise ValueError(
            f"batch size {train_cfg.batch_size} exceeds dataset size {len(records)}"
        )
    total = train_cfg.epochs * per_epoch
    if train_cfg.max_steps:
        total = min(total, train_cfg.max_steps)
    if params is None:
        params = init_params(model_cfg, train_cfg.seed, zero_final=train_cfg.identity_init,
                             dtype=np.dtype(train_cfg.dtype))

    result = TrainResult(params, start_step)
    for step in range(start_step, total):
        epoch, idx, accels, seeds = _batch_plan(len(records), train_cfg, step)
        batch = prepare_batch([records[i] for i in idx], size, accels, seeds, train_cfg.dtype)
        params.zero_grad()
        _, final_state = run_model(batch.kspace, batch.masks, batch.meta, params, model_cfg)
        report = backward_reversible(final_state, batch.targets, batch.kspace, batch.masks,
                                     batch.meta, params, model_cfg, ssim_cfg)
        lr = adam_step(params, optim_cfg, step + 1, epoch)
        result.losses.append(report.loss)
        result.lrs.append(lr)
        result.step = step + 1
        if metrics_log is not None:
            for j in range(len(idx)):
                row = item_metrics(report.m_hat[j], batch.targets[j], ssim_cfg)
                metrics_log.write(format_metrics(epoch, step + 1, "train", accels[j], *row) + "\n")
        if (step + 1) % 50 == 0:
            log.info("step %d epoch %d loss %.5f lr %.2e", step + 1, epoch, report.loss, lr)
        epoch_done = (step + 1) % per_epoch == 0
        if epoch_done or step + 1 == total:
            if val_records and metrics_log is not None:
                for accel in sorted(set(train_cfg.accelerations)):
                    res = evaluate(val_records, params, model_cfg, accel, size, train_cfg.dtype,
                                   ssim_cfg=ssim_cfg)
                    metrics_log.write(format_metrics(epoch, step + 1, "val", accel,
                                                     *res.mean("model")) + "\n")
            if checkpoint is not None:
                _atomic_save(checkpoint, params,
                             checkpoint_header(model_cfg, optim_cfg, train_cfg, step + 1))
            if metrics_log is not None:
                metrics_log.flush()
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def eval_mask_seed(index: int) -> int:
    """Mask seed used for record ``index`` during evaluation."""
    return index


@dataclass
class EvalResult:
    acceleration: int
    rows: dict[str, list[tuple[float, float, float]]]
    reconstructions: np.ndarray | None = None
    zero_filled: np.ndarray | None = None
    targets: np.ndarray | None = None

    def mean(self, method: str) -> tuple[float, float, float]:
        vals = np.asarray(self.rows[method], dtype=float)
        return tuple(float(v) for v in vals.mean(axis=0))


def evaluate(records: list[DatasetRecord], params: ParamStore, model_cfg: ModelConfig,
             acceleration: int, image_size: int, dtype: str = "float64",
             batch_size: int = 8, keep_images: bool = False,
             ssim_cfg: metrics.SSIMConfig = metrics.SSIMConfig()) -> EvalResult:
    """Per-record NMSE, PSNR and SSIM of the model and the zero-filled baseline."""
    for i, rec in enumerate(records):
        if rec.coils != model_cfg.coil_count:
            raise ValueError(
                f"record {i} has {rec.coils} coils, checkpoint expects {model_cfg.coil_count}"
            )
    rows = {"zero-filled": [], "model": []}
    recon, zf, tg = [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        seeds = [eval_mask_seed(start + j) for j in range(len(chunk))]
        batch = prepare_batch(chunk, image_size, [acceleration] * len(chunk), seeds, dtype)
        m_hat, _ = run_model(batch.kspace, batch.masks, batch.meta, params, model_cfg)
        base = zero_filled_magnitude(batch)
        for j in range(len(chunk)):
            rows["model"].append(item_metrics(m_hat[j], batch.targets[j], ssim_cfg))
            rows["zero-filled"].append(item_metrics(base[j], batch.targets[j], ssim_cfg))
        if keep_images:
            recon.append(m_hat)
            zf.append(base)
            tg.append(batch.targets)
    res = EvalResult(acceleration, rows)
    if keep_images:
        res.reconstructions = np.concatenate(recon)
        res.zero_filled = np.concatenate(zf)
        res.targets = np.concatenate(tg)
    return res


def format_table(results: list[EvalResult]) -> str:
    lines = [f"{'method':<12} {'accel':>5} {'NMSE':>10} {'PSNR':>9} {'SSIM':>8}"]
    for res in results:
        for method in ("zero-filled", "model"):
            n, p, s = res.mean(method)
            lines.append(f"{method:<12} {str(res.acceleration) + 'x':>5} {n:>10.4f} {p:>9.2f} {s:>8.4f}")
    return "\n".join(lines)

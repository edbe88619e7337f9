"""Command-line interface.

Exit codes: 0 ok, 1 usage or configuration error, 2 I/O error,
3 failed self-check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import checks, metrics, mri, phantom, train
from .model import PRESETS, ModelConfig
from .nn import CheckpointError

log = logging.getLogger("irim")

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CHECK = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# flat key=value configuration
# ---------------------------------------------------------------------------

CONFIG_SECTIONS = {
    "model": ModelConfig,
    "optim": train.OptimConfig,
    "train": train.TrainConfig,
    "ssim": metrics.SSIMConfig,
}


def config_keys() -> dict[str, str]:
    """Config key -> section name."""
    return {f.name: section for section, cls in CONFIG_SECTIONS.items() for f in fields(cls)}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config line {n}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(base: dict[str, dict[str, str]], overrides: dict[str, str]):
    """Apply flat overrides to per-section dicts; unknown keys are errors."""
    keys = config_keys()
    merged = {s: dict(v) for s, v in base.items()}
    for key, value in overrides.items():
        if key not in keys:
            raise UsageError(f"unknown config key {key!r}")
        merged.setdefault(keys[key], {})[key] = value
    try:
        model_cfg = ModelConfig.from_dict(merged.get("model", {})).validate()
        optim_cfg = train.optim_from_dict(merged.get("optim", {}))
        train_cfg = train.train_from_dict(merged.get("train", {}))
        ssim_d = merged.get("ssim", {})
        ssim_cfg = metrics.SSIMConfig(
            window=int(ssim_d.get("window", 7)),
            k1=float(ssim_d.get("k1", 0.01)),
            k2=float(ssim_d.get("k2", 0.03)),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return model_cfg, optim_cfg, train_cfg, ssim_cfg


def _set_pairs(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _log_config(model_cfg, optim_cfg, train_cfg, ssim_cfg):
    for cfg in (model_cfg, optim_cfg, train_cfg, ssim_cfg):
        for f in fields(cfg):
            log.info("config %s=%s", f.name, getattr(cfg, f.name))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size < 16:
        raise UsageError("--size must be >= 16")
    if args.coils < 1:
        raise UsageError("--coils must be >= 1")
    if args.noise_sigma < 0:
        raise UsageError("--noise-sigma must be >= 0")
    records = phantom.make_dataset(args.count, args.size, args.coils, args.noise_sigma, args.seed)
    phantom.write_dataset(records, args.out)
    log.info("wrote %d records to %s", len(records), args.out)
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.config:
        overrides.update(parse_config_text(Path(args.config).read_text()))
    overrides.update(_set_pairs(args.set))

    resume_path = args.out if args.resume else None
    if resume_path and Path(resume_path).exists():
        params, model_cfg, optim_cfg, train_cfg, start = train.load_model(resume_path)
        base = {
            "model": model_cfg.to_dict(),
            "optim": train._fields_to_dict(optim_cfg),
            "train": train._fields_to_dict(train_cfg),
        }
        locked = set(overrides) - {"epochs", "max_steps"}
        if locked:
            raise UsageError(f"cannot change {sorted(locked)} when resuming")
    else:
        params, start = None, 0
        preset = PRESETS[args.preset]
        if preset.large and not args.allow_large:
            raise UsageError(
                f"preset {args.preset!r} is full scale ({preset.image_size}x{preset.image_size}, "
                f"K={preset.model.coil_count}); pass --allow-large to run it"
            )
        base = {"model": preset.model.to_dict(), "train": {"image_size": str(preset.image_size)}}
    model_cfg, optim_cfg, train_cfg, ssim_cfg = resolve_config(base, overrides)
    _log_config(model_cfg, optim_cfg, train_cfg, ssim_cfg)

    records = phantom.read_dataset(args.data)
    val = phantom.read_dataset(args.val) if args.val else None
    log_mode = "a" if start else "w"
    log_path = args.log or f"{args.out}.metrics.csv"
    try:
        with open(log_path, log_mode) as fh:
            if not start:
                fh.write(train.LOG_HEADER + "\n")
            res = train.train(records, model_cfg, optim_cfg, train_cfg, params=params,
                              start_step=start, checkpoint=args.out, metrics_log=fh,
                              val_records=val, ssim_cfg=ssim_cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log.info("finished at step %d; checkpoint %s", res.step, args.out)
    return 0


def _load_for_eval(args):
    params, model_cfg, _, train_cfg, step = train.load_model(args.checkpoint)
    records = phantom.read_dataset(args.data)
    if args.limit:
        records = records[: args.limit]
    for i, rec in enumerate(records):
        if rec.coils != model_cfg.coil_count:
            raise UsageError(
                f"record {i} has {rec.coils} coils but the checkpoint expects {model_cfg.coil_count}"
            )
    return params, model_cfg, train_cfg, step, records


def cmd_reconstruct(args) -> int:
    params, model_cfg, train_cfg, step, records = _load_for_eval(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = train.evaluate(records, params, model_cfg, args.accel, train_cfg.image_size,
                         train_cfg.dtype, keep_images=True)
    lines = []
    for i in range(len(records)):
        phantom.write_pgm(res.zero_filled[i], out / f"record{i:04d}_zero_filled.pgm")
        phantom.write_pgm(res.reconstructions[i], out / f"record{i:04d}_reconstruction.pgm")
        phantom.write_pgm(res.targets[i], out / f"record{i:04d}_target.pgm")
        lines.append(train.format_metrics(0, step, "recon", args.accel, *res.rows["model"][i]))
    (out / "metrics.csv").write_text(train.LOG_HEADER + "\n" + "".join(l + "\n" for l in lines))
    print("\n".join(lines))
    return 0


def cmd_evaluate(args) -> int:
    params, model_cfg, train_cfg, step, records = _load_for_eval(args)
    results = [
        train.evaluate(records, params, model_cfg, a, train_cfg.image_size, train_cfg.dtype)
        for a in args.accel
    ]
    print(train.format_table(results))
    if args.log:
        with open(args.log, "a") as fh:
            for res in results:
                for method, split in (("zero-filled", "eval-zf"), ("model", "eval")):
                    fh.write(train.format_metrics(0, step, split, res.acceleration,
                                                  *res.mean(method)) + "\n")
    return 0


def cmd_check(args) -> int:
    results = checks.run_all(sabotage=args.sabotage)
    for res in results:
        for line in res.lines():
            print(line)
    ok = all(r.passed for r in results)
    print(f"summary={'pass' if ok else 'FAIL'}")
    return 0 if ok else EXIT_CHECK


def cmd_export_image(args) -> int:
    records = phantom.read_dataset(args.data)
    if not 0 <= args.index < len(records):
        raise UsageError(f"--index {args.index} out of range (dataset has {len(records)} records)")
    rec = records[args.index]
    if args.kind == "target":
        image = rec.target()
    else:
        images = mri.ifft2c(rec.kdata)
        mask = mri.make_mask(images.shape[-1], args.accel, train.eval_mask_seed(args.index))
        image = phantom.rss(mri.zero_filled(mri.forward_op(images, mask), mask))
    phantom.write_pgm(image, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="irim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="simulate a phantom dataset")
    p.add_argument("--size", type=int, default=64, help="image size in pixels (>= 16)")
    p.add_argument("--count", type=int, required=True, help="number of records")
    p.add_argument("--coils", type=int, default=1, help="number of receive coils K")
    p.add_argument("--noise-sigma", type=float, default=0.01, help="k-space noise std per component")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output IRIMDATA file")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="training IRIMDATA file")
    p.add_argument("--val", help="optional validation IRIMDATA file")
    p.add_argument("--out", required=True, help="checkpoint path (written every epoch)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk-single")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--log", help="metrics log path (default: <out>.metrics.csv)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    p.add_argument("--allow-large", action="store_true", help="permit the full-scale paper-* presets")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("reconstruct", cmd_reconstruct, "write PGM reconstructions and per-record metrics"),
        ("evaluate", cmd_evaluate, "print an NMSE/PSNR/SSIM table"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, help="IRIMDATA file")
        p.add_argument("--checkpoint", required=True, help="IRIMCKPT file")
        p.add_argument("--limit", type=int, default=0, help="only use the first N records")
        if name == "reconstruct":
            p.add_argument("--accel", type=int, choices=(4, 8), default=4)
            p.add_argument("--out-dir", required=True)
        else:
            p.add_argument("--accel", type=int, choices=(4, 8), action="append")
            p.add_argument("--log", help="append mean metrics to this log")
        p.set_defaults(func=func)

    p = sub.add_parser("check", help="run the invariant self-checks")
    p.add_argument("--sabotage", choices=("store-grad",), help="inject a fault into the gradient oracle")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("export-image", help="export one record as a PGM image")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--kind", choices=("target", "zero-filled"), default="target")
    p.add_argument("--accel", type=int, choices=(4, 8), default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_image)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and not args.accel:
        args.accel = [4, 8]
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"irim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, phantom.DatasetError, CheckpointError) as exc:
        print(f"irim {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"irim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

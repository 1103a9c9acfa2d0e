"""Command-line entry point wiring all subsystems together.

Subcommands: `train`, `eval`, `profile`, `gradcheck`, `augmix-preview`,
and `synth` (synthetic dataset generator). The config file is the single
source of truth for an experiment; `--set key=value` flags override
individual entries after the file is parsed and unknown keys are
rejected. Exit codes: 0 success, 2 invalid configuration, 3 missing
file, 1 any other failure; every failure prints one diagnostic line on
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .augmix import AugmixConfig, augmix, rng_for_sample
from .blocks import build_model
from .config import (
    ModelConfig,
    config_from_items,
    desk_config,
    parse_config_items,
)
from .data import (
    ManifestDataset,
    load_checkpoint,
    load_manifest,
    load_ppm,
    save_checkpoint,
    save_ppm,
)
from .errors import ConfigError
from .gradcheck import FLOAT32_CASES, run_standard_check, standard_cases
from .profiler import count_params, estimate_flops
from .synth import generate_dataset
from .train import TrainConfig, evaluate, train

_MODEL_KEYS = {
    "in_channels", "image_size", "patch_size", "widths", "stage_ncbs",
    "stage_repeats", "stage_downsample", "heads", "shrink_ratio",
    "pool_strides", "mlp_ratio", "num_classes", "ca_kernel", "precision",
    "norm_mean", "norm_std",
}

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"augmix"}
_AUGMIX_KEYS = {"augmix", "augmix_width", "augmix_depth", "augmix_severity",
                "augmix_alpha"}


def _split_items(items: dict[str, str]) -> tuple[dict, dict]:
    """Partition flat config entries into model keys and training keys."""
    model_items: dict[str, str] = {}
    train_items: dict[str, str] = {}
    for key, value in items.items():
        name = key[6:] if key.startswith("train.") else key
        if name in _MODEL_KEYS and not key.startswith("train."):
            model_items[name] = value
        elif name in _TRAIN_KEYS or name in _AUGMIX_KEYS:
            train_items[name] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return model_items, train_items


def _train_config_from_items(items: dict[str, str], seed: int | None) -> TrainConfig:
    cfg = TrainConfig()
    try:
        for key, value in items.items():
            if key == "augmix":
                if int(value) == 0:
                    cfg.augmix = None
            elif key == "augmix_width":
                cfg.augmix.width = int(value)
            elif key == "augmix_depth":
                cfg.augmix.depth = int(value)
            elif key == "augmix_severity":
                cfg.augmix.severity = int(value)
            elif key == "augmix_alpha":
                cfg.augmix.alpha = float(value)
            elif key in ("epochs", "decay_every_epochs", "train_batch",
                         "eval_batch", "seed"):
                setattr(cfg, key, int(value))
            elif key in ("base_lr", "decay_factor", "momentum", "weight_decay"):
                setattr(cfg, key, float(value))
            else:
                raise ConfigError(f"unknown training key {key!r}")
    except ValueError as exc:
        raise ConfigError(f"malformed training value: {exc}") from exc
    if seed is not None:
        cfg.seed = seed
    if cfg.augmix is not None:
        cfg.augmix.seed = cfg.seed
    return cfg.validate()


def _load_configs(config_path, set_overrides, seed) -> tuple[ModelConfig, TrainConfig]:
    items: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        items = parse_config_items(path.read_text(encoding="utf-8"))
    for override in set_overrides or ():
        if "=" not in override:
            raise ConfigError(f"--set needs key=value, got {override!r}")
        key, value = override.split("=", 1)
        items[key.strip()] = value.strip()
    model_items, train_items = _split_items(items)
    model_cfg = config_from_items(model_items) if model_items else desk_config()
    train_cfg = _train_config_from_items(train_items, seed)
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args.config, args.set, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_manifest = load_manifest(args.train_manifest,
                                   class_count=model_cfg.num_classes)
    train_data = ManifestDataset(train_manifest, model_cfg.image_size)
    eval_data = None
    if args.eval_manifest:
        eval_manifest = load_manifest(args.eval_manifest,
                                      class_count=model_cfg.num_classes,
                                      split="test")
        eval_data = ManifestDataset(eval_manifest, model_cfg.image_size)
    model = build_model(model_cfg, seed=train_cfg.seed)
    log_path = out_dir / "metrics.log"
    ckpt_path = out_dir / "best.nlvt"
    state, metrics = train(model, train_data, eval_data, train_cfg,
                           log_path=log_path, checkpoint_path=ckpt_path)
    if eval_data is None:
        save_checkpoint(model, ckpt_path)
    last = metrics[-1]
    print(f"trained {state.epoch} epochs, {state.step} steps; "
          f"final train acc {last.train_acc:.4f}, eval acc {last.eval_acc:.4f}; "
          f"best eval {state.best_eval:.4f}")
    print(f"metrics: {log_path}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    manifest = load_manifest(args.manifest,
                             class_count=model.config.num_classes,
                             split="test")
    data = ManifestDataset(manifest, model.config.image_size)
    acc = evaluate(model, data, args.batch)
    print(f"accuracy: {acc:.6f} ({len(data)} samples)")
    return 0


def _cmd_profile(args) -> int:
    model_cfg, _ = _load_configs(args.config, args.set, None)
    model = build_model(model_cfg, seed=0)
    report = estimate_flops(model)
    params_report = count_params(model)
    if report.total_params != params_report.total_params:
        raise AssertionError("parameter accounting disagrees between walks")
    print(report.to_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
        print(f"csv: {args.csv}")
    return 0


def _cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.bits == 64 else np.float32
    tolerance = 1e-6 if args.bits == 64 else 1e-3
    if args.op:
        names = [args.op]
    elif args.bits == 64:
        names = sorted(standard_cases(dtype))
    else:
        names = sorted(FLOAT32_CASES)
    failed = False
    for name in names:
        err = run_standard_check(name, seeds=args.seeds, dtype=dtype)
        status = "ok" if err < tolerance else "FAIL"
        print(f"gradcheck {name}: max relative error {err:.3e} [{status}]")
        failed |= err >= tolerance
    return 1 if failed else 0


def _cmd_augmix_preview(args) -> int:
    img_path = Path(args.image)
    if not img_path.is_file():
        raise FileNotFoundError(f"image not found: {img_path}")
    img = load_ppm(img_path)
    cfg = AugmixConfig(width=args.width, depth=args.depth,
                       severity=args.severity, seed=args.seed).validate()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        out = augmix(img, cfg, rng_for_sample(cfg.seed, i))
        target = out_dir / f"{img_path.stem}_aug{i:03d}.ppm"
        save_ppm(target, out)
        print(f"wrote {target}")
    return 0


def _cmd_synth(args) -> int:
    train_csv, eval_csv = generate_dataset(
        args.out_dir, args.train_count, args.eval_count, args.classes,
        args.side, args.seed)
    print(f"train manifest: {train_csv}")
    print(f"eval manifest: {eval_csv}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nextlvt",
        description="Hybrid convolution/transformer classifier toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from manifests")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--eval-manifest")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch", type=int, default=256)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("profile", help="per-layer parameter/MAC report")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--csv", help="also write machine-readable CSV here")
    p.set_defaults(fn=_cmd_profile)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", help="single op/block to check (default: all)")
    p.add_argument("--bits", type=int, choices=(32, 64), default=64)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("augmix-preview", help="write augmented PPM variants")
    p.add_argument("--image", required=True, help="source PPM image")
    p.add_argument("--out-dir", default="augmix-preview")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--width", type=int, default=3)
    p.add_argument("--depth", type=int, default=3)
    p.set_defaults(fn=_cmd_augmix_preview)

    p = sub.add_parser("synth", help="generate a synthetic sign dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-count", type=int, default=1000)
    p.add_argument("--eval-count", type=int, default=200)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_synth)

    return parser


def run(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # single diagnostic line, documented code
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())

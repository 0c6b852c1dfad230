"""Command-line entry point binding the modules into reproducible runs.

One JSON config document drives everything; unknown keys are rejected and
every run directory receives the fully materialized config (defaults filled
in, flag overrides applied and recorded under "provenance"). Failures print
a single machine-parsable JSON line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import backend
from .augment import AugmentConfig
from .errors import VoxrepError
from .evaluation import DiceReport, cross_validate, evaluate_records
from .model import FpnConfig, representation_dim
from .phantom import PhantomSpec, default_organ_classes, generate_dataset, read_manifest
from .sampler import PatchSpec, SamplerConfig
from .train import (Checkpoint, FinetuneSchedule, PretrainConfig, ProbeConfig,
                    finetune, init_pretrain_params, load_checkpoint, params_to_tensors,
                    pretrain, train_probe, fpn_config_from_metadata, CHECKPOINT_VERSION,
                    pretrain_metadata)

WORKERS_ENV = "VOXREP_WORKERS"


def default_config() -> dict:
    return {
        "seed": 0,
        "data": {"train_manifest": None, "labeled_manifest": None},
        "preprocess": {"body_threshold_hu": -500.0,
                       "target_spacing_mm": [1.0, 1.0, 2.0],
                       "air_fill_hu": -1000.0},
        "augment": {k: list(v) if isinstance(v, tuple) else v
                    for k, v in asdict(AugmentConfig()).items()},
        "sampler": {"patch": [32, 32, 16], "positives_per_pair": 128,
                    "min_overlap_fraction": 0.25, "max_retries": 20},
        "model": {"levels": 3, "base_channels": 8, "convs_per_stage": 2,
                  "projector_hidden": 512, "projection_dim": 128,
                  "representation_levels": None},
        "loss": {"temperature": 0.1},
        "pretrain": {"total_batches": 2000, "volumes_per_batch": 4,
                     "learning_rate": 0.0003, "val_volumes": 4, "val_batches": 2,
                     "val_interval": 10, "checkpoint_interval": 500, "workers": None},
        "probe": {"mode": "linear", "total_batches": 1000, "batch_size": 4,
                  "learning_rate": 0.0003, "num_classes": 4,
                  "eval_window": [-1350.0, 1000.0]},
        "finetune": {"freeze_batches": 15000, "ramp_batches": 1200,
                     "backbone_lr_start": 0.00003, "backbone_lr_end": 0.0003,
                     "head_lr": 0.0003},
        "eval": {"k_folds": 3},
        "provenance": {},
    }


class ConfigValidationError(VoxrepError):
    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = violations


def _merge(defaults: dict, user: dict, prefix: str = ""):
    merged = {}
    violations = []
    for key, default_value in defaults.items():
        if isinstance(default_value, dict) and key != "provenance":
            sub = user.get(key) or {}
            if not isinstance(sub, dict):
                violations.append(f"section {prefix}{key} must be an object")
                sub = {}
            merged[key], errs = _merge(default_value, sub, f"{prefix}{key}.")
            violations.extend(errs)
        else:
            merged[key] = user.get(key, default_value)
    for key in user:
        if key not in defaults:
            violations.append(f"unknown key: {prefix}{key}")
    return merged, violations


def load_run_config(path: str | None, overrides: dict) -> dict:
    """Merge a user config file over defaults, then apply flag overrides
    ('section.key' paths). Every violation is reported at once."""
    user = {}
    if path is not None:
        user = json.loads(Path(path).read_text())
    config, violations = _merge(default_config(), user)
    if violations:
        raise ConfigValidationError(violations)
    applied = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
        applied[dotted] = value
    config["provenance"] = {"config_file": path, "flag_overrides": applied}
    return config


def build_pretrain_config(config: dict) -> PretrainConfig:
    workers = config["pretrain"]["workers"]
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "0"))
    model = dict(config["model"])
    if model["representation_levels"] is not None:
        model["representation_levels"] = tuple(model["representation_levels"])
    return PretrainConfig(
        total_batches=config["pretrain"]["total_batches"],
        volumes_per_batch=config["pretrain"]["volumes_per_batch"],
        learning_rate=config["pretrain"]["learning_rate"],
        temperature=config["loss"]["temperature"],
        seed=config["seed"],
        patch=PatchSpec(tuple(config["sampler"]["patch"])),
        fpn=FpnConfig(**model),
        augment=AugmentConfig(**config["augment"]),
        sampler=SamplerConfig(
            positives_per_pair=config["sampler"]["positives_per_pair"],
            min_overlap_fraction=config["sampler"]["min_overlap_fraction"],
            max_retries=config["sampler"]["max_retries"]),
        val_volumes=config["pretrain"]["val_volumes"],
        val_batches=config["pretrain"]["val_batches"],
        val_interval=config["pretrain"]["val_interval"],
        checkpoint_interval=config["pretrain"]["checkpoint_interval"],
        workers=workers,
    )


def build_probe_config(config: dict, mode: str | None = None) -> ProbeConfig:
    return ProbeConfig(
        mode=mode or config["probe"]["mode"],
        total_batches=config["probe"]["total_batches"],
        batch_size=config["probe"]["batch_size"],
        learning_rate=config["probe"]["learning_rate"],
        num_classes=config["probe"]["num_classes"],
        eval_window=tuple(config["probe"]["eval_window"]),
        seed=config["seed"],
        patch=PatchSpec(tuple(config["sampler"]["patch"])),
    )


def random_init_checkpoint(config: dict) -> Checkpoint:
    """Backbone checkpoint at initialization, for random-baseline probing."""
    pre = build_pretrain_config(config)
    params = init_pretrain_params(pre)
    return Checkpoint(version=CHECKPOINT_VERSION, step=0,
                      metadata=pretrain_metadata(pre, {"adam": {"lr": pre.learning_rate,
                                                        "step_count": 0}}),
                      tensors=params_to_tensors(params))


def _write_materialized(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _require(config, section, key):
    value = config[section][key]
    if value is None:
        raise VoxrepError(f"config value {section}.{key} is required for this command")
    return value


def cmd_synth(args) -> int:
    organs = default_organ_classes()
    for organ in organs:
        lo, hi = organ.semi_axes_mm
        organ.semi_axes_mm = (lo * args.organ_scale, hi * args.organ_scale)
    spec = PhantomSpec(extents=tuple(args.extents), spacing=tuple(args.spacing),
                       organ_classes=organs)
    manifest = generate_dataset(spec, count=args.count, seed=args.seed,
                                out_dir=args.out)
    print(json.dumps({"manifest": str(manifest), "count": args.count}))
    return 0


def cmd_pretrain(args) -> int:
    config = load_run_config(args.config, {
        "seed": args.seed,
        "pretrain.total_batches": args.total_batches,
        "pretrain.workers": args.workers,
        "data.train_manifest": args.manifest,
    })
    pre = build_pretrain_config(config)
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True))
        return 0
    manifest = _require(config, "data", "train_manifest")
    out_dir = Path(args.out)
    _write_materialized(config, out_dir)
    final = pretrain(pre, manifest, out_dir, resume_from=args.resume)
    print(json.dumps({"checkpoint": str(out_dir / "ckpt_final.vxckpt"),
                      "steps": final.step}))
    return 0


def cmd_probe(args) -> int:
    config = load_run_config(args.config, {
        "seed": args.seed,
        "probe.total_batches": args.total_batches,
        "data.labeled_manifest": args.manifest,
    })
    probe_cfg = build_probe_config(config, mode=args.mode)
    manifest = _require(config, "data", "labeled_manifest")
    if not args.random_init and args.backbone is None:
        raise VoxrepError("probe needs --backbone or --random-init")
    backbone = random_init_checkpoint(config) if args.random_init \
        else load_checkpoint(args.backbone)
    out_dir = Path(args.out)
    _write_materialized(config, out_dir)
    ckpt = train_probe(backbone, probe_cfg, manifest, out_dir, frozen=True)
    print(json.dumps({"checkpoint": str(out_dir / "ckpt_final.vxckpt"),
                      "steps": ckpt.step, "mode": probe_cfg.mode}))
    return 0


def cmd_finetune(args) -> int:
    config = load_run_config(args.config, {
        "seed": args.seed,
        "probe.total_batches": args.total_batches,
        "data.labeled_manifest": args.manifest,
    })
    probe_cfg = build_probe_config(config, mode="nonlinear")
    schedule = FinetuneSchedule(**config["finetune"])
    manifest = _require(config, "data", "labeled_manifest")
    backbone = load_checkpoint(args.backbone)
    out_dir = Path(args.out)
    _write_materialized(config, out_dir)
    ckpt = finetune(backbone, probe_cfg, schedule, manifest, out_dir)
    print(json.dumps({"checkpoint": str(out_dir / "ckpt_final.vxckpt"),
                      "steps": ckpt.step}))
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args.config, {
        "seed": args.seed,
        "data.labeled_manifest": args.manifest,
    })
    manifest = _require(config, "data", "labeled_manifest")
    records = read_manifest(manifest)
    patch = PatchSpec(tuple(config["sampler"]["patch"]))
    num_classes = config["probe"]["num_classes"]
    spacing = tuple(config["preprocess"]["target_spacing_mm"])
    out_dir = Path(args.out)
    _write_materialized(config, out_dir)

    if args.cross_validate:
        if args.backbone is None:
            raise VoxrepError("eval --cross-validate needs --backbone")
        backbone = load_checkpoint(args.backbone)
        probe_cfg = build_probe_config(config)

        def train_fn(train_records, fold):
            fold_manifest = out_dir / f"fold_{fold}" / "train_manifest.jsonl"
            fold_manifest.parent.mkdir(parents=True, exist_ok=True)
            with open(fold_manifest, "w") as f:
                for record in train_records:
                    f.write(json.dumps(record) + "\n")
            return train_probe(backbone, probe_cfg, fold_manifest,
                               out_dir / f"fold_{fold}", frozen=True)

        report = cross_validate(records, k=config["eval"]["k_folds"],
                                train_fn=train_fn, seed=config["seed"],
                                patch=patch, num_classes=num_classes,
                                target_spacing=spacing)
        report.write_csv(out_dir / "dice.csv")
        report.write_json(out_dir / "dice.json")
        print(json.dumps({"macro_mean": report.macro_mean,
                          "report": str(out_dir / "dice.json")}))
    else:
        if args.model is None:
            raise VoxrepError("eval needs --model (or use --cross-validate)")
        ckpt = load_checkpoint(args.model)
        scores = evaluate_records(ckpt, records, patch, num_classes, spacing)
        report = DiceReport.aggregate([scores])
        report.write_csv(out_dir / "dice.csv")
        report.write_json(out_dir / "dice.json")
        print(json.dumps({"per_class": {str(k): v for k, v in scores.items()},
                          "macro_mean": report.macro_mean}))
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    fpn = fpn_config_from_metadata(ckpt.metadata)
    summary = {
        "step": ckpt.step,
        "representation_dim": representation_dim(fpn),
        "tensors": len(ckpt.tensors),
        "parameters": int(sum(int(np.prod(t.shape)) for t in ckpt.tensors.values())),
        "backend": backend.active_name(),
    }
    if "head" in ckpt.metadata:
        summary["head"] = ckpt.metadata["head"]["mode"]
        summary["num_classes"] = ckpt.metadata["head"]["num_classes"]
    print(json.dumps(summary, sort_keys=True))
    return 0


def _int_triple(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return parts


def _float_triple(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated floats")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxrep",
                                     description="voxel representation pre-training and probing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled phantom dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--extents", type=_int_triple, default=[64, 64, 32])
    p.add_argument("--spacing", type=_float_triple, default=[1.0, 1.0, 2.0])
    p.add_argument("--organ-scale", type=float, default=1.0, dest="organ_scale",
                   help="scale organ sizes, for small volumes")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    p.add_argument("--config")
    p.add_argument("--out", default="runs/pretrain")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--total-batches", type=int, dest="total_batches")
    p.add_argument("--workers", type=int)
    p.add_argument("--resume")
    p.add_argument("--dry-run", action="store_true", dest="dry_run")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="train a voxel-wise head on a frozen backbone")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["linear", "nonlinear"])
    p.add_argument("--backbone")
    p.add_argument("--random-init", action="store_true", dest="random_init")
    p.add_argument("--out", default="runs/probe")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--total-batches", type=int, dest="total_batches")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("finetune", help="train backbone and head with the ramp schedule")
    p.add_argument("--config")
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", default="runs/finetune")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--total-batches", type=int, dest="total_batches")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="tiled inference and Dice reporting")
    p.add_argument("--config")
    p.add_argument("--model", help="checkpoint with backbone and head")
    p.add_argument("--backbone", help="backbone checkpoint for --cross-validate")
    p.add_argument("--cross-validate", action="store_true", dest="cross_validate")
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint summary")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.fn(args)
    except ConfigValidationError as exc:
        print(json.dumps({"error": "config validation failed",
                          "violations": exc.violations}), file=sys.stderr)
        return 1
    except (VoxrepError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: pretrain, analyze, evaluate, import-teacher.

One TOML config file drives a run; the ablation switches are plain keys
(stages, epochs per stage, momentum, target LN, student re-initialization,
mask ratio). Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .analysis import (attention_distance_report, corloc, iou, localize_report,
                       svd_spectrum_report, write_attention_csv, write_boxes_csv,
                       write_svd_csv)
from .checkpoint import load_store, save_store
from .config import (AugmentConfig, DataConfig, DistillConfig, ModelConfig, MomentumPolicy,
                     OptimConfig, ProbeConfig, RunConfig)
from .data import build_dataset
from .errors import ConfigError, DataError, NumericsError
from .pipeline import run_pipeline
from .probe import evaluate_accuracy, train_probe
from .teachers import import_teacher, save_feature_archive

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "MASKDISTILL_OUTPUT"


def _build(cls, section: dict, name: str):
    """Construct a config dataclass, rejecting unknown keys."""
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) and k in ("crop_scale", "normalize_mean",
                                                           "normalize_std") else v
              for k, v in section.items()}
    return cls(**kwargs)


_RUN_KEYS = {"stages", "student_reinit", "teacher", "output_dir", "base_seed",
             "save_every_epoch", "per_step_metrics"}


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path!r}: {exc}") from None
    known_sections = {"model", "distill", "optim", "momentum", "probe", "data", "run"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    run = raw.get("run", {})
    bad = set(run) - _RUN_KEYS
    if bad:
        raise ConfigError(f"unknown key(s) in [run]: {sorted(bad)}")
    return RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        distill=_build(DistillConfig, raw.get("distill", {}), "distill"),
        optim=_build(OptimConfig, raw.get("optim", {}), "optim"),
        momentum=_build(MomentumPolicy, raw.get("momentum", {}), "momentum"),
        probe=_build(ProbeConfig, raw.get("probe", {}), "probe"),
        data=_build(DataConfig, raw.get("data", {}), "data"),
        stages=tuple(run.get("stages", (8, 8))),
        student_reinit=run.get("student_reinit", True),
        teacher=run.get("teacher", "random"),
        output_dir=run.get("output_dir", "runs/out"),
        base_seed=run.get("base_seed", 0),
        save_every_epoch=run.get("save_every_epoch", False),
        per_step_metrics=run.get("per_step_metrics", True),
    )


def _out_dir(cfg_dir: str, override: str | None) -> str:
    return os.environ.get(OUTPUT_ENV) or override or cfg_dir


def _augment_for(cfg: RunConfig) -> AugmentConfig | None:
    if not cfg.data.augment:
        return None
    return AugmentConfig(crop_scale=cfg.data.crop_scale, flip_prob=cfg.data.flip_prob,
                         output_size=cfg.model.image_size)


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.base_seed = args.seed
    out = _out_dir(cfg.output_dir, args.output)
    if args.validate_only:
        print(f"config ok: {len(cfg.stages)} stage(s), model hash {cfg.model.config_hash()}")
        return EXIT_OK
    train, _ = build_dataset(cfg.data)
    teacher = None
    features = None
    if cfg.teacher != "random":
        kind, payload = import_teacher(cfg.teacher, projection_dim=cfg.model.projection_dim)
        if kind == "store":
            teacher = payload
        else:
            features = payload
    result = run_pipeline(cfg.model, cfg.distill, cfg.optim, list(cfg.stages), train,
                          policy=cfg.momentum, student_reinit=cfg.student_reinit,
                          base_seed=cfg.base_seed, teacher=teacher,
                          teacher_features=features, augment=_augment_for(cfg),
                          out_dir=out, save_every_epoch=args.save_every_epoch
                          or cfg.save_every_epoch,
                          per_step_metrics=cfg.per_step_metrics,
                          resume_from=args.checkpoint)
    print(f"wrote {len(result.checkpoints)} stage checkpoint(s) under {out}")
    return EXIT_OK


def _load_gt_boxes(path: str):
    boxes: dict[int, list] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            boxes.setdefault(int(row["image"]), []).append(
                (float(row["x_min"]), float(row["y_min"]),
                 float(row["x_max"]), float(row["y_max"])))
    return boxes


def cmd_analyze(args) -> int:
    cfg = load_run_config(args.config)
    out = _out_dir(cfg.output_dir, args.output)
    if args.validate_only:
        print("config ok")
        return EXIT_OK
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint {args.checkpoint!r} not found")
    store = load_store(args.checkpoint)
    train, val = build_dataset(cfg.data)
    manifest = val if args.split == "val" else train
    os.makedirs(out, exist_ok=True)
    if args.which == "attn_dist":
        report = attention_distance_report(store, manifest, n_images=args.n_images)
        path = os.path.join(out, "attn_dist.csv")
        write_attention_csv(path, report)
        if args.plot:
            from .analysis import plot_attention_distance

            plot_attention_distance(report, os.path.join(out, "attn_dist.png"))
        print(f"wrote {path} ({report.distances.shape[0]} layers x "
              f"{report.distances.shape[1]} heads)")
    elif args.which == "svd":
        report = svd_spectrum_report(store, manifest, n_images=args.n_images)
        path = os.path.join(out, "svd.csv")
        write_svd_csv(path, report)
        if args.plot:
            from .analysis import plot_svd_spectrum

            plot_svd_spectrum(report, os.path.join(out, "svd.png"))
        print(f"wrote {path}")
    else:  # localize
        boxes = localize_report(store, manifest, n_images=args.n_images)
        gt = None
        if args.gt_boxes:
            table = _load_gt_boxes(args.gt_boxes)
            gt = [table.get(i, []) for i in range(len(boxes))]
        elif manifest.boxes is not None:
            gt = [manifest.boxes[i] for i in range(len(boxes))]
        ious = None
        if gt is not None:
            ious = [max((iou(b, g) for g in gts), default=0.0) for b, gts in zip(boxes, gt)]
            score = corloc(boxes, gt)
            print(f"CorLoc: {score:.4f} over {len(boxes)} images")
        path = os.path.join(out, "boxes.csv")
        write_boxes_csv(path, boxes, ious)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    out = _out_dir(cfg.output_dir, args.output)
    if args.validate_only:
        print("config ok")
        return EXIT_OK
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint {args.checkpoint!r} not found")
    store = load_store(args.checkpoint)
    probe_cfg = cfg.probe
    if args.mode is not None:
        probe_cfg = dataclasses.replace(probe_cfg, mode=args.mode)
    train, val = build_dataset(cfg.data)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.base_seed, 101)))
    if probe_cfg.mode == "finetune":
        head, store = train_probe(store, train, probe_cfg, rng)
    else:
        head = train_probe(store, train, probe_cfg, rng)
    acc = evaluate_accuracy(head, store, val)
    stage = store.meta.get("stage_index", -1)
    os.makedirs(out, exist_ok=True)
    summary = os.path.join(out, "eval.csv")
    new_file = not os.path.exists(summary)
    with open(summary, "a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(["stage", "mode", "accuracy"])
        writer.writerow([stage, probe_cfg.mode, f"{acc:.4f}"])
    print(f"top-1 accuracy: {acc:.4f} (stage {stage}, {probe_cfg.mode}) -> {summary}")
    return EXIT_OK


def cmd_import_teacher(args) -> int:
    cfg = load_run_config(args.config)
    out = _out_dir(cfg.output_dir, args.output)
    if args.validate_only:
        print("config ok")
        return EXIT_OK
    kind, payload = import_teacher(args.archive, projection_dim=cfg.model.projection_dim)
    os.makedirs(out, exist_ok=True)
    if kind == "store":
        path = os.path.join(out, "teacher.ckpt")
        save_store(path, payload, extra_meta={"imported_from": os.path.abspath(args.archive)})
        print(f"imported encoder teacher ({payload.config.embed_dim}-d) -> {path}")
    else:
        path = os.path.join(out, "teacher_features.npz")
        save_feature_archive(path, payload)
        print(f"imported feature archive {payload.shape} -> {path}")
    print(f"use it by setting run.teacher = \"{path}\" in the config")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdistill",
        description="Multi-stage masked knowledge distillation: pretrain, analyze, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=False):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--output", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="override base seed")
        p.add_argument("--validate-only", action="store_true",
                       help="validate the config and exit without side effects")
        if checkpoint_required:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("pretrain", help="run the multi-stage distillation pipeline")
    common(p)
    p.add_argument("--checkpoint", default=None, help="resume from a run-state snapshot")
    p.add_argument("--stage", type=int, default=None,
                   help="expected resume stage (sanity check against the snapshot)")
    p.add_argument("--save-every-epoch", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("analyze", help="attention/SVD/localization reports from a checkpoint")
    common(p, checkpoint_required=True)
    p.add_argument("--which", required=True, choices=["attn_dist", "svd", "localize"])
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--n-images", type=int, default=64)
    p.add_argument("--plot", action="store_true", help="also write PNG plots (needs matplotlib)")
    p.add_argument("--gt-boxes", default=None, help="CSV of ground-truth boxes for CorLoc")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("evaluate", help="linear-probe or fine-tune a checkpoint")
    common(p, checkpoint_required=True)
    p.add_argument("--mode", default=None, choices=["linear_probe", "finetune"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("import-teacher", help="register external teacher weights or features")
    common(p)
    p.add_argument("--archive", required=True,
                   help="checkpoint file or .npz feature archive to import")
    p.set_defaults(func=cmd_import_teacher)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "stage", None) is not None and args.checkpoint:
        from .checkpoint import load_checkpoint

        meta, _ = load_checkpoint(args.checkpoint)
        if meta.get("stage_index") != args.stage:
            print(f"error: snapshot is at stage {meta.get('stage_index')}, "
                  f"expected {args.stage}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: synth, train, eval, explain, occlude, ablate. A nested JSON
config (see ``trivit.config``) drives everything; ``--seed`` overrides the
seed and ``--serial`` forces the deterministic single-threaded path. Exit
codes: 0 success, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from trivit import explain as explain_mod
from trivit import training as training_mod
from trivit import volume as volume_mod
from trivit.config import RunConfig, load_config
from trivit.errors import ConfigError, TriVitError, UndefinedCorrelationError
from trivit.model import TriViewModel
from trivit.training import Trainer, evaluate_model


def _manifest(cfg: RunConfig):
    path = os.path.join(cfg.data_dir, "manifest.csv")
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path} (run `trivit synth` first)")
    return volume_mod.load_manifest(path)


def _load_best_model(cfg: RunConfig, checkpoint_path: str) -> TriViewModel:
    model, best_params, _, _ = training_mod.load_checkpoint(checkpoint_path, cfg.model_config())
    if best_params is not None:
        for name, t in model.parameters():
            t.data = best_params[name].copy()
    return model


def _write_report(report, rows, out_dir: str, stem: str):
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, f"{stem}_report.json")
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    csv_path = os.path.join(out_dir, f"{stem}_per_sample.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "age", "pred", "bag"])
        for path, age, pred in rows:
            writer.writerow([path, repr(float(age)), repr(float(pred)),
                             repr(abs(float(pred) - float(age)))])
    return report_path, csv_path


def cmd_synth(cfg: RunConfig, args) -> int:
    manifest = volume_mod.generate_synthetic_dataset(cfg.data_dir, cfg.synth_config(), cfg.seed)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} volumes to {cfg.data_dir} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


def _train(cfg: RunConfig, serial: bool, resume: bool):
    manifest = _manifest(cfg)
    train_cfg = cfg.train_config(serial=serial)
    augment_cfg = cfg.augment_config()
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.zip")
    if resume:
        if not os.path.exists(ckpt_path):
            raise ConfigError(f"--resume: checkpoint not found at {ckpt_path}")
        trainer = training_mod.resume_trainer(
            ckpt_path, cfg.model_config(), manifest, train_cfg, augment_cfg
        )
    else:
        model = training_mod.build_model(cfg.model_config(), cfg.seed)
        trainer = Trainer(model, manifest, train_cfg, augment_cfg)
    trainer.fit()
    training_mod.save_checkpoint(ckpt_path, trainer, run_config=cfg.to_dict())
    training_mod.write_log_csv(trainer.logs, os.path.join(cfg.out_dir, "train_log.csv"))
    return trainer, ckpt_path


def cmd_train(cfg: RunConfig, args) -> int:
    trainer, ckpt_path = _train(cfg, serial=args.serial, resume=args.resume)
    last = trainer.logs[-1] if trainer.logs else None
    if last is not None:
        print(f"epoch {last.epoch}: train_mse={last.train_mse:.4f} val_mae={last.val_mae:.4f}")
    print(f"best val MAE {trainer.best_val_mae:.4f} at epoch {trainer.best_epoch}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load_best_model(cfg, args.checkpoint)
    manifest = _manifest(cfg)
    report, rows, _ = evaluate_model(model, manifest, args.split)
    report_path, csv_path = _write_report(report, rows, cfg.out_dir, f"eval_{args.split}")
    print(report.to_json())
    print(f"report: {report_path}")
    print(f"per-sample: {csv_path}")
    return 0


def _saliency_outputs(cfg: RunConfig, grid, stem: str):
    os.makedirs(cfg.out_dir, exist_ok=True)
    raw_path = os.path.join(cfg.out_dir, f"{stem}_raw.f32")
    explain_mod.save_saliency(grid, raw_path)
    mm = grid.minmax()
    mm_path = os.path.join(cfg.out_dir, f"{stem}_minmax.f32")
    explain_mod.save_saliency(mm, mm_path)
    for axis, name in enumerate("hwc"):
        idx = grid.dims[axis] // 2
        explain_mod.write_pgm_slice(mm, axis, idx, os.path.join(cfg.out_dir, f"{stem}_{name}{idx}.pgm"))
    return raw_path, mm_path


def cmd_explain(cfg: RunConfig, args) -> int:
    model = _load_best_model(cfg, args.checkpoint)
    vol = volume_mod.load_volume(args.volume)
    data = model.prepare_volume(vol)
    method = cfg.raw["explain"]["attention_extraction"]
    maps = explain_mod.model_attention_maps(model, data, method=method)
    grid = explain_mod.synthesize_3d_attention(
        maps, model.cfg.volume_dims, model.cfg.vit.patch_size,
        combine=cfg.raw["explain"]["synthesis"], normalize=False,
    )
    raw_path, mm_path = _saliency_outputs(cfg, grid, "attention")
    peak = explain_mod.argmax_voxel(grid)
    print(f"attention peak voxel: {peak}")
    print(f"saliency: {raw_path} {mm_path}")
    return 0


def _split_volumes(model: TriViewModel, manifest, split: str):
    records = manifest.split(split)
    if not records:
        raise ConfigError(f"split {split!r} is empty")
    volumes, ages = [], []
    for record in records:
        vol = volume_mod.load_volume(manifest.resolve(record))
        volumes.append(model.prepare_volume(vol))
        ages.append(record.age)
    return volumes, np.asarray(ages)


def cmd_occlude(cfg: RunConfig, args) -> int:
    model = _load_best_model(cfg, args.checkpoint)
    manifest = _manifest(cfg)
    volumes, ages = _split_volumes(model, manifest, args.split)
    occ_cfg = cfg.occlusion_config()
    workers = 0 if args.serial else int(cfg.raw["train"]["parallel_workers"])
    result = explain_mod.occlusion_sweep(
        model.predict_prepared, volumes, ages, occ_cfg, workers=workers
    )
    raw_path, _ = _saliency_outputs(cfg, result.grid, "occlusion")
    method = cfg.raw["explain"]["attention_extraction"]
    maps = explain_mod.mean_attention_maps(model, volumes, method=method)
    attn = explain_mod.synthesize_3d_attention(
        maps, model.cfg.volume_dims, model.cfg.vit.patch_size,
        combine=cfg.raw["explain"]["synthesis"], normalize=False,
    )
    _saliency_outputs(cfg, attn, "occlusion_attention")
    try:
        agreement = f"{explain_mod.compare_maps(attn, result.grid):.2f}"
    except UndefinedCorrelationError as exc:
        agreement = f"undefined ({exc})"
    peak = explain_mod.argmax_voxel(result.grid)
    print(f"baseline MAE: {result.baseline_mae:.4f} over {result.positions} cube positions")
    print(f"top occlusion voxel: {peak}")
    print(f"attention/occlusion agreement: {agreement}")
    print(f"saliency: {raw_path}")
    return 0


def _ablate_variants(cfg: RunConfig):
    ab = cfg.raw["ablate"]
    variants: list[tuple[str, dict]] = []
    for strategy in ab["fusions"]:
        variants.append((strategy, {"fusion": {"strategy": strategy}}))
    if ab["single_views"]:
        for axis in ("x", "y", "z"):
            variants.append(
                (f"vit_{axis}", {"views": [axis], "fusion": {"strategy": "best"}})
            )
    for widths in ab["depth_sweep"]:
        name = f"mlp_depth_{len(widths)}"
        variants.append((name, {"fusion": {"strategy": "mlp", "widths": widths}}))
    return variants


def cmd_ablate(cfg: RunConfig, args) -> int:
    from trivit.config import make_config

    manifest = _manifest(cfg)
    rows = []
    for name, overrides in _ablate_variants(cfg):
        variant_cfg = make_config(
            _deep_update(cfg.to_dict(), overrides), preset="production", seed=cfg.seed
        )
        model = training_mod.build_model(variant_cfg.model_config(), variant_cfg.seed)
        trainer = Trainer(
            model, manifest, variant_cfg.train_config(serial=args.serial),
            variant_cfg.augment_config(),
        )
        trainer.fit()
        best = trainer.best_model()
        report, _, _ = evaluate_model(best, manifest, "test")
        rows.append((name, report))
        r = "nan" if report.r is None else f"{report.r:.4f}"
        rp_ = "nan" if report.rp is None else f"{report.rp:.4f}"
        print(f"{name}: mae={report.mae:.4f} r={r} rp={rp_}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    table_path = os.path.join(cfg.out_dir, "ablation.csv")
    with open(table_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "mae", "r", "rp"])
        for name, report in rows:
            writer.writerow([
                name,
                repr(report.mae),
                "nan" if report.r is None else repr(report.r),
                "nan" if report.rp is None else repr(report.rp),
            ])
    print(f"table: {table_path}")
    return 0


def _deep_update(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trivit",
        description="Tri-view vision transformer for volumetric age regression",
    )
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--preset", default="desk", choices=["desk", "production"],
                        help="base preset when no config file overrides it")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--serial", action="store_true",
                        help="force the deterministic single-threaded path")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic dataset")

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the run directory's checkpoint")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])

    p_explain = sub.add_parser("explain", help="attention saliency for one volume")
    p_explain.add_argument("--checkpoint", required=True)
    p_explain.add_argument("--volume", required=True)

    p_occ = sub.add_parser("occlude", help="occlusion sweep over a split")
    p_occ.add_argument("--checkpoint", required=True)
    p_occ.add_argument("--split", default="test", choices=["train", "val", "test"])

    sub.add_parser("ablate", help="train and compare fusion variants")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "occlude": cmd_occlude,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, preset=args.preset, seed=args.seed)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TriVitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: synth, ingest, split, train, predict, evaluate,
ensemble, tune-weights, ablate and report.

Every command writes a resolved-config snapshot next to its outputs and
exits 0 on success, 2 on configuration errors, 3 on data errors and 4 on
runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import traceback

import numpy as np
import yaml

from . import dataset as ds
from . import synth as synth_mod
from .augment import PRESETS, apply_paired, build_policy
from .ensemble import (EnsembleWeights, OofPredictionSet, average_probabilities,
                       ensemble_predict, tune_class_weights)
from .exceptions import ConfigError, DataError
from .metrics import evaluate_dataset, result_from_counts, confusion_counts
from .model import MODES, ModelConfig, load_checkpoint, predict_pair
from .objective import DEFAULT_CLASS_WEIGHTS
from .training import TrainConfig, predict_scene, train_fold

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

# class palette for overlays (RGB): background transparent, blue -> red ramp
PALETTE = {1: (40, 80, 255), 2: (255, 220, 0), 3: (255, 140, 0), 4: (255, 30, 30)}

CONFIG_SECTIONS = ("model", "train", "synth")


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_run_config(path: str | None, sets=()) -> dict:
    """Load the YAML run config and apply --set section.key=value overrides."""
    config = {}
    if path:
        try:
            with open(path) as fh:
                config = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = config
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_scalar(value)
    for section in config:
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {section!r}; "
                              f"known: {CONFIG_SECTIONS}")
    return config


def _build_section(cls, mapping: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in mapping.items()}
    if "aug_overrides" in mapping:
        coerced["aug_overrides"] = mapping["aug_overrides"]
    return cls(**coerced)


def _write_snapshot(out_dir: str, config: dict, args: argparse.Namespace) -> None:
    os.makedirs(out_dir, exist_ok=True)
    resolved = dict(config)
    resolved["_invocation"] = {k: v for k, v in vars(args).items() if k != "func"}
    with open(os.path.join(out_dir, "resolved_config.yaml"), "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)


def render_overlay(pre: np.ndarray, post: np.ndarray, mask: np.ndarray,
                   out_path: str) -> np.ndarray:
    """Write a (pre | post | overlay) panel; overlay paints damage classes over
    the pre image with the fixed palette, background stays untouched."""
    if pre.shape != post.shape or pre.shape[:2] != mask.shape:
        raise ValueError("pre, post and mask shapes must agree")
    overlay = pre.copy()
    for cls, color in PALETTE.items():
        overlay[mask == cls] = color
    panel = np.concatenate([pre, post, overlay], axis=1)
    ds.save_image_png(panel, out_path)
    return panel


def _load_scene_pairs(records):
    return {r.scene_id: ds.load_raster_pair(r) for r in records}


def _text_table(rows, columns) -> str:
    widths = [max(len(str(r.get(c, ""))) for r in rows + [{c: c}]) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines)


def _constant_background_score(pairs, val_ids) -> float:
    result = evaluate_dataset(
        (np.zeros_like(pairs[sid].mask), pairs[sid].mask) for sid in val_ids)
    return result.score


ABLATION_AXES = {
    "fusion": [("input-concat", {"model.mode": "input-concat"}),
               ("siamese-concat", {"model.mode": "siamese-concat"}),
               ("siamese-subtract", {"model.mode": "siamese-subtract"})],
    "augmentation": [(p, {"train.augmentation": p}) for p in PRESETS],
    "loss": [("ce", {"train.class_weights": (1.0, 1.0, 1.0, 1.0, 1.0)}),
             ("weighted-ce", {"train.class_weights": DEFAULT_CLASS_WEIGHTS})],
    "encoder": [("tiny-a", {"model.encoder": "tiny-a"}),
                ("tiny-b", {"model.encoder": "tiny-b"})],
}


def run_ablation(records, pairs, folds, fold_id: int, model_config: ModelConfig,
                 train_config: TrainConfig, axis: str):
    """Train one model per axis value with everything else fixed.

    Returns (rows, baseline_score) where rows carry variant name, metrics and
    a status; baseline_score is the constant all-background predictor's score
    on the same validation fold.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from "
                          f"{sorted(ABLATION_AXES)}")
    val_ids = folds.scenes_in_fold(fold_id)
    baseline = _constant_background_score(pairs, val_ids)
    rows = []
    for variant, overrides in ABLATION_AXES[axis]:
        mc = dataclasses.replace(model_config)
        tc = dataclasses.replace(train_config)
        for key, value in overrides.items():
            section, name = key.split(".")
            target = mc if section == "model" else tc
            setattr(target, name, value)
        try:
            ckpt = train_fold(records, folds, fold_id, mc, tc, pairs=pairs)
            r = ckpt.val_result
            rows.append({"variant": variant, "f1_loc": round(r.f1_loc, 4),
                         "f1_class": round(r.f1_class, 4), "score": round(r.score, 4),
                         "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - a failed run becomes a failed row
            rows.append({"variant": variant, "f1_loc": "", "f1_class": "",
                         "score": "", "status": f"failed: {exc}"})
    return rows, baseline


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    config = load_run_config(args.config, args.set or [])
    cfg = _build_section(synth_mod.SynthConfig, config.get("synth", {}))
    out = args.out
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    manifest = []
    for i in range(args.scenes):
        record, pair = synth_mod.generate_synthetic_scene(args.seed + i, cfg)
        pre_rel = f"images/{record.scene_id}_pre.png"
        post_rel = f"images/{record.scene_id}_post.png"
        ds.save_image_png(pair.pre, os.path.join(out, pre_rel))
        ds.save_image_png(pair.post, os.path.join(out, post_rel))
        ds.save_mask_png(pair.mask, os.path.join(out, f"masks/{record.scene_id}.png"))
        manifest.append({
            "scene_id": record.scene_id,
            "disaster_id": record.disaster_id,
            "pre_image": pre_rel,
            "post_image": post_rel,
            "width": record.width,
            "height": record.height,
            "buildings": [{"polygon": [list(p) for p in a.polygon], "damage": a.damage}
                          for a in record.annotations],
        })
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    _write_snapshot(out, config, args)
    print(f"wrote {args.scenes} synthetic scenes to {out}")


def cmd_ingest(args):
    records = ds.ingest_manifest(args.manifest)
    total = np.zeros(4, dtype=np.int64)
    for r in records:
        total += ds.damage_histogram(r)
    print(f"{len(records)} scenes, {int(total.sum())} buildings")
    print("damage histogram (classes 1..4):", total.tolist())


def cmd_split(args):
    records = ds.ingest_manifest(args.manifest)
    assignment = ds.split_folds(records, args.k, args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "folds.csv")
    ds.write_folds_csv(assignment, path)
    print(f"wrote {path} ({len(records)} scenes, {args.k} folds)")


def _train_setup(args):
    config = load_run_config(args.config, args.set or [])
    model_config = _build_section(ModelConfig, config.get("model", {}))
    train_config = _build_section(TrainConfig, config.get("train", {}))
    if args.seed is not None:
        train_config.seed = args.seed
    records = ds.ingest_manifest(args.manifest)
    folds = ds.read_folds_csv(args.folds)
    return config, model_config, train_config, records, folds


def cmd_train(args):
    config, model_config, train_config, records, folds = _train_setup(args)
    _write_snapshot(args.out, config, args)
    ckpt = train_fold(records, folds, args.fold, model_config, train_config,
                      out_dir=args.out)
    path = os.path.join(args.out, "checkpoint.pt")
    ckpt.save(path)
    print(f"best epoch {ckpt.epoch}: score {ckpt.val_result.score:.4f} -> {path}")


def cmd_predict(args):
    records = ds.ingest_manifest(args.manifest)
    model, _ = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    scene_ids = set(args.scene or [r.scene_id for r in records])
    for record in records:
        if record.scene_id not in scene_ids:
            continue
        pair = ds.load_raster_pair(record)
        _, probs = predict_pair(model, pair.pre, pair.post)
        pred = probs.argmax(axis=2).astype(np.uint8)
        ds.save_mask_png(pred, os.path.join(args.out, f"{record.scene_id}.png"))
        np.save(os.path.join(args.out, f"{record.scene_id}_probs.npy"),
                probs.astype(np.float32))
    print(f"wrote predictions for {len(scene_ids)} scenes to {args.out}")


def cmd_evaluate(args):
    records = ds.ingest_manifest(args.manifest)
    total = None
    for record in records:
        pred_path = os.path.join(args.pred, f"{record.scene_id}.png")
        if not os.path.isfile(pred_path):
            raise DataError(f"no prediction for scene {record.scene_id} at {pred_path}")
        pred = ds.load_mask_png(pred_path)
        truth = ds.rasterize_annotations(record.annotations, record.width, record.height)
        counts = confusion_counts(pred, truth)
        total = counts if total is None else total + counts
    if total is None:
        raise DataError("manifest holds no scenes")
    result = result_from_counts(total)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=1)
    row = {"F1loc": f"{result.f1_loc:.4f}", "F1class": f"{result.f1_class:.4f}",
           "Score": f"{result.score:.4f}"}
    table = _text_table([row], ["F1loc", "F1class", "Score"])
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)


def _load_prob_dirs(prob_dirs, records):
    """Per-scene probability maps from `predict` output directories."""
    per_model = []
    for d in prob_dirs:
        maps = {}
        for record in records:
            path = os.path.join(d, f"{record.scene_id}_probs.npy")
            if os.path.isfile(path):
                maps[record.scene_id] = np.load(path)
        per_model.append(maps)
    return per_model


def cmd_ensemble(args):
    records = ds.ingest_manifest(args.manifest)
    with open(args.weights) as fh:
        raw = json.load(fh)
    weights = EnsembleWeights(model_weights=tuple(raw.get("model_weights",
                                                          [1.0] * len(args.probs))),
                              class_weights=tuple(raw.get("class_weights",
                                                          [1.0] * 5)))
    per_model = _load_prob_dirs(args.probs, records)
    os.makedirs(args.out, exist_ok=True)
    for record in records:
        maps = [m[record.scene_id] for m in per_model if record.scene_id in m]
        if not maps:
            raise DataError(f"no probability maps for scene {record.scene_id}")
        mw = [w for w, m in zip(weights.model_weights, per_model)
              if record.scene_id in m]
        pred = ensemble_predict(maps, EnsembleWeights(
            model_weights=tuple(mw), class_weights=weights.class_weights))
        ds.save_mask_png(pred, os.path.join(args.out, f"{record.scene_id}.png"))
    print(f"wrote ensembled masks for {len(records)} scenes to {args.out}")


def cmd_tune_weights(args):
    records = ds.ingest_manifest(args.manifest)
    per_model = _load_prob_dirs(args.probs, records)
    scenes = []
    for record in records:
        maps = [m[record.scene_id] for m in per_model if record.scene_id in m]
        if not maps:
            raise DataError(f"scene {record.scene_id} has no out-of-fold prediction")
        avg = average_probabilities(maps, [1.0] * len(maps))
        truth = ds.rasterize_annotations(record.annotations, record.width, record.height)
        scenes.append((avg, truth))
    oof = OofPredictionSet(scenes=scenes)
    baseline = evaluate_dataset(
        ((p.argmax(axis=2).astype(np.uint8), t) for p, t in scenes))
    tuned, result = tune_class_weights(oof)
    os.makedirs(args.out, exist_ok=True)
    payload = tuned.to_dict()
    payload["score_before"] = baseline.score
    payload["score_after"] = result.score
    with open(os.path.join(args.out, "ensemble_weights.json"), "w") as fh:
        json.dump(payload, fh, indent=1)
    print(f"score {baseline.score:.4f} -> {result.score:.4f}, "
          f"class weights {list(np.round(tuned.class_weights, 2))}")


def cmd_ablate(args):
    config, model_config, train_config, records, folds = _train_setup(args)
    _write_snapshot(args.out, config, args)
    pairs = _load_scene_pairs(records)
    rows, baseline = run_ablation(records, pairs, folds, args.fold, model_config,
                                  train_config, args.axis)
    columns = ["variant", "f1_loc", "f1_class", "score", "status"]
    table = _text_table(rows, columns)
    with open(os.path.join(args.out, f"ablation_{args.axis}.txt"), "w") as fh:
        fh.write(table + f"\nconstant-background baseline score: {baseline:.4f}\n")
    with open(os.path.join(args.out, f"ablation_{args.axis}.csv"), "w") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(str(r.get(c, "")) for c in columns) + "\n")
    print(table)
    print(f"constant-background baseline score: {baseline:.4f}")
    if any(r["status"] != "ok" for r in rows):
        raise RuntimeError("one or more ablation runs failed")


def cmd_report(args):
    records = ds.ingest_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    scene_ids = set(args.scene or [r.scene_id for r in records])
    for record in records:
        if record.scene_id not in scene_ids:
            continue
        pair = ds.load_raster_pair(record)
        render_overlay(pair.pre, pair.post, pair.mask,
                       os.path.join(args.out, f"{record.scene_id}_overlay.png"))
        if args.augmented:
            policy = build_policy(args.augmented,
                                  {"shared_spatial": {"crop": min(record.width,
                                                                  record.height)}})
            sample = apply_paired(policy, pair, args.seed or 0)
            render_overlay(sample.pre, sample.post, sample.mask,
                           os.path.join(args.out,
                                        f"{record.scene_id}_augmented.png"))
    print(f"wrote overlays for {len(scene_ids)} scenes to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damageseg",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, out=True):
        if manifest:
            p.add_argument("--manifest", required=True)
        if out:
            p.add_argument("--out", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, manifest=False)
    p.add_argument("--scenes", type=int, default=16)
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("ingest", help="validate a manifest and print a summary")
    common(p, out=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="stratified fold assignment")
    common(p)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_split, seed=0)

    p = sub.add_parser("train", help="train one fold")
    common(p)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run inference from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", action="append")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predicted masks against a manifest")
    common(p)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="combine probability maps into masks")
    common(p)
    p.add_argument("--probs", nargs="+", required=True)
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("tune-weights", help="tune per-class ensemble multipliers")
    common(p)
    p.add_argument("--probs", nargs="+", required=True)
    p.set_defaults(func=cmd_tune_weights)

    p = sub.add_parser("ablate", help="comparison table along one axis")
    common(p)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render overlay panels")
    common(p)
    p.add_argument("--scene", action="append")
    p.add_argument("--augmented", choices=PRESETS, default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

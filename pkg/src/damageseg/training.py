"""Fold-wise training: random crops for training, full-resolution validation,
cosine learning-rate decay, and checkpoint selection on the weighted score."""

from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .augment import build_policy, apply_paired
from .dataset import FoldAssignment, load_raster_pair
from .exceptions import ConfigError
from .metrics import EvalResult, evaluate_dataset
from .model import ModelConfig, SegmentationModel, build_model, predict_pair, save_checkpoint
from .objective import DEFAULT_CLASS_WEIGHTS, weighted_cross_entropy


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 1e-5
    crop: int = 512
    val_size: int = 1024
    optimizer: str = "radam"
    augmentation: str = "medium"
    aug_overrides: dict = field(default_factory=dict)
    class_weights: tuple = DEFAULT_CLASS_WEIGHTS
    seed: int = 0
    crops_per_scene: int = 1
    # stop once the validation score reaches this value (None = run all epochs)
    target_score: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError("need 0 < min_lr <= base_lr")
        if self.crop > self.val_size:
            raise ConfigError("crop must not exceed val_size")
        if self.optimizer not in ("radam", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, base_lr: float, min_lr: float) -> float:
    """Cosine decay from base_lr at step 0 to min_lr at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class Checkpoint:
    model: SegmentationModel
    epoch: int
    val_result: EvalResult
    history: list          # per-epoch validation EvalResult
    train_losses: list     # per-epoch mean training loss

    def save(self, path: str) -> None:
        save_checkpoint(path, self.model, self.epoch, self.val_result,
                        extra={"score_history": [r.score for r in self.history],
                               "train_losses": self.train_losses})


def predict_scene(model: SegmentationModel, pair) -> np.ndarray:
    _, probs = predict_pair(model, pair.pre, pair.post)
    return probs.argmax(axis=2).astype(np.uint8)


def _make_optimizer(model, cfg: TrainConfig):
    cls = torch.optim.RAdam if cfg.optimizer == "radam" else torch.optim.Adam
    return cls(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def _batch_tensors(samples):
    pre = torch.from_numpy(np.stack([s.pre for s in samples])).permute(0, 3, 1, 2).float() / 255.0
    post = torch.from_numpy(np.stack([s.post for s in samples])).permute(0, 3, 1, 2).float() / 255.0
    mask = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    return pre, post, mask


def train_fold(records, folds: FoldAssignment, fold_id: int,
               model_config: ModelConfig, train_config: TrainConfig,
               pairs: dict | None = None, out_dir: str | None = None,
               batch_callback=None, overfit: bool = False) -> Checkpoint:
    """Train on all scenes outside fold_id, validate on fold_id at full size.

    pairs maps scene_id to a preloaded RasterPair; missing entries are read
    from the record's image paths. With overfit=True every scene is used for
    both training and validation (smoke-test mode). batch_callback, when set,
    receives the scene_ids of every training batch.
    """
    cfg = train_config
    by_id = {r.scene_id: r for r in records}
    if overfit:
        train_ids = sorted(by_id)
        val_ids = sorted(by_id)
    else:
        if not 0 <= fold_id < folds.k:
            raise ConfigError(f"fold_id {fold_id} outside 0..{folds.k - 1}")
        train_ids = [s for s in folds.scenes_outside_fold(fold_id) if s in by_id]
        val_ids = [s for s in folds.scenes_in_fold(fold_id) if s in by_id]
    if not train_ids or not val_ids:
        raise ConfigError(f"fold {fold_id}: empty train ({len(train_ids)}) or "
                          f"validation ({len(val_ids)}) split")

    pairs = dict(pairs or {})
    for sid in train_ids + val_ids:
        if sid not in pairs:
            pairs[sid] = load_raster_pair(by_id[sid])

    torch.manual_seed(cfg.seed)
    model = build_model(model_config, cfg.seed)
    optimizer = _make_optimizer(model, cfg)
    policy = build_policy(cfg.augmentation, cfg.aug_overrides)
    policy.shared_spatial.crop = cfg.crop

    sample_ids = train_ids * cfg.crops_per_scene
    batch_size = min(cfg.batch_size, len(sample_ids))
    steps_per_epoch = len(sample_ids) // batch_size
    total_steps = cfg.epochs * steps_per_epoch

    log_path = os.path.join(out_dir, "training_log.csv") if out_dir else None
    if log_path:
        os.makedirs(out_dir, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(
                ["epoch", "lr", "train_loss", "f1_loc", "f1_class", "score"])

    best_state = None
    best_epoch = -1
    best_result = None
    history = []
    train_losses = []
    global_step = 0
    for epoch in range(cfg.epochs):
        model.train()
        epoch_rng = np.random.default_rng(cfg.seed * 1_000_003 + epoch)
        order = epoch_rng.permutation(len(sample_ids))
        losses = []
        for b in range(steps_per_epoch):  # last incomplete batch dropped
            idx = order[b * batch_size:(b + 1) * batch_size]
            batch_seed = cfg.seed * 1_000_003 + epoch * 10_007 + b
            samples = []
            batch_scenes = []
            for j, i in enumerate(idx):
                sid = sample_ids[i]
                batch_scenes.append(sid)
                samples.append(apply_paired(policy, pairs[sid], batch_seed * 131 + j))
            if batch_callback:
                batch_callback(batch_scenes)
            pre, post, mask = _batch_tensors(samples)
            lr = lr_at(global_step, total_steps, cfg.base_lr, cfg.min_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            logits = model(pre, post)
            loss = weighted_cross_entropy(logits, mask, cfg.class_weights)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, "
                                   f"batch seed {batch_seed}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            global_step += 1
        train_losses.append(float(np.mean(losses)))

        model.eval()
        result = evaluate_dataset(
            (predict_scene(model, pairs[sid]), pairs[sid].mask) for sid in val_ids)
        history.append(result)
        if best_result is None or result.score > best_result.score:
            best_result = result
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if log_path:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [epoch, lr, train_losses[-1], result.f1_loc, result.f1_class,
                     result.score])
        if cfg.target_score is not None and best_result.score >= cfg.target_score:
            break

    model.load_state_dict(best_state)
    return Checkpoint(model=model, epoch=best_epoch, val_result=best_result,
                      history=history, train_losses=train_losses)

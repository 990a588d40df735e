"""Probability-map ensembling and out-of-fold class-weight tuning.

Predictions from several models are combined as a weighted average of their
per-pixel class probabilities; per-class multipliers are applied before the
argmax, which lets the ensemble trade background recall for damage recall.
The multipliers are tuned by coordinate ascent on the weighted F1 score over
out-of-fold predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import NUM_CLASSES
from .exceptions import DataError
from .metrics import EvalResult, confusion_counts, result_from_counts

REFERENCE_CLASS_WEIGHTS = (0.5, 1.1, 1.1, 1.1, 1.1)


@dataclass
class EnsembleWeights:
    model_weights: tuple = (1.0,)
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        mw = np.asarray(self.model_weights, dtype=np.float64)
        cw = np.asarray(self.class_weights, dtype=np.float64)
        if (mw < 0).any() or not (mw > 0).any():
            raise ValueError("model weights must be non-negative with at least one positive")
        if len(cw) != NUM_CLASSES or (cw <= 0).any():
            raise ValueError("need 5 strictly positive class weights")

    def to_dict(self) -> dict:
        return {"model_weights": list(self.model_weights),
                "class_weights": list(self.class_weights)}


@dataclass
class OofPredictionSet:
    """Per-scene (H x W x 5 probability map, H x W truth mask) pairs where the
    predicting model never trained on the scene."""

    scenes: list = field(default_factory=list)  # list of (probs, truth)

    def __post_init__(self):
        if not self.scenes:
            raise DataError("out-of-fold prediction set is empty")
        for i, (probs, truth) in enumerate(self.scenes):
            if probs is None:
                raise DataError(f"scene {i} has no out-of-fold prediction")
            if probs.shape[:2] != truth.shape or probs.shape[2] != NUM_CLASSES:
                raise DataError(f"scene {i}: probability map shape {probs.shape} does not "
                                f"match truth {truth.shape}")
            sums = probs.sum(axis=2)
            if np.abs(sums - 1.0).max() > 1e-4:
                raise DataError(f"scene {i}: probabilities do not sum to 1 per pixel")


def average_probabilities(maps, model_weights) -> np.ndarray:
    """Per-pixel convex combination of probability maps."""
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one probability map")
    w = np.asarray(model_weights, dtype=np.float64)
    if len(w) != len(maps):
        raise ValueError(f"{len(maps)} maps but {len(w)} model weights")
    if (w < 0).any() or w.sum() == 0:
        raise ValueError("model weights must be non-negative and not all zero")
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ValueError(f"map {i} shape {m.shape} differs from {shape}")
    w = w / w.sum()
    out = np.zeros(shape, dtype=np.float64)
    for wi, m in zip(w, maps):
        out += wi * m
    return out


def ensemble_predict(maps, weights: EnsembleWeights) -> np.ndarray:
    """Average the maps, scale per class, argmax (ties go to the lower class)."""
    avg = average_probabilities(maps, weights.model_weights)
    scaled = avg * np.asarray(weights.class_weights, dtype=np.float64)
    return scaled.argmax(axis=2).astype(np.uint8)


def _score_class_weights(oof: OofPredictionSet, class_weights: np.ndarray) -> EvalResult:
    total = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for probs, truth in oof.scenes:
        pred = (probs * class_weights).argmax(axis=2).astype(np.uint8)
        total += confusion_counts(pred, truth)
    return result_from_counts(total)


@dataclass
class TuneSettings:
    grid_min: float = 0.3
    grid_max: float = 2.0
    grid_step: float = 0.1
    passes: int = 2


def tune_class_weights(oof: OofPredictionSet, search: TuneSettings | None = None,
                       model_weights: tuple = (1.0,)):
    """Coordinate-ascent over per-class multipliers maximizing the weighted score.

    Deterministic: classes are swept in order 0..4 over a fixed grid for a
    fixed number of passes; a candidate replaces the incumbent only on strict
    improvement, so the result never scores below the all-ones baseline.
    """
    search = search or TuneSettings()
    weights = np.ones(NUM_CLASSES, dtype=np.float64)
    best = _score_class_weights(oof, weights)
    grid = np.arange(search.grid_min, search.grid_max + search.grid_step / 2,
                     search.grid_step)
    for _ in range(search.passes):
        for c in range(NUM_CLASSES):
            for value in grid:
                candidate = weights.copy()
                candidate[c] = value
                result = _score_class_weights(oof, candidate)
                if result.score > best.score:
                    best = result
                    weights = candidate
    tuned = EnsembleWeights(model_weights=tuple(model_weights),
                            class_weights=tuple(weights))
    return tuned, best

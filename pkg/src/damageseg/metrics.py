"""Pixel-level confusion accounting and the weighted F1 competition score.

Score = 0.3 * F1_localization + 0.7 * F1_damage, where F1_localization is
the binary building-vs-background F1 and F1_damage aggregates the four
per-damage-class F1s with a harmonic mean. Counts are pooled across scenes
before any F1 is computed (micro-averaging).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import NUM_CLASSES

LOC_WEIGHT = 0.3
CLASS_WEIGHT = 0.7
HARMONIC_EPS = 1e-6


def confusion_counts(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """5x5 matrix m with m[t][p] = number of pixels of truth t predicted p."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
            raise ValueError(f"{name} mask holds values outside 0..4")
    flat = truth.astype(np.int64).ravel() * NUM_CLASSES + pred.astype(np.int64).ravel()
    return np.bincount(flat, minlength=NUM_CLASSES * NUM_CLASSES).reshape(NUM_CLASSES, NUM_CLASSES)


def _f1(tp: float, fp: float, fn: float) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def f1_localization(counts: np.ndarray) -> float:
    """Binary building (classes 1..4) vs background F1; 1.0 when no buildings exist anywhere."""
    tp = counts[1:, 1:].sum()
    fp = counts[0, 1:].sum()
    fn = counts[1:, 0].sum()
    return _f1(tp, fp, fn)


def f1_damage(counts: np.ndarray):
    """One-vs-rest F1 per damage class 1..4 and their harmonic mean.

    A class absent from both truth and prediction scores 1.0. The harmonic
    mean adds 1e-6 to each term against division by zero and is clipped to 1.
    """
    per_class = np.empty(4)
    for c in range(1, NUM_CLASSES):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        per_class[c - 1] = _f1(tp, fp, fn)
    harmonic = min(1.0, 4.0 / np.sum(1.0 / (per_class + HARMONIC_EPS)))
    return per_class, float(harmonic)


def weighted_score(f1_loc: float, f1_class: float) -> float:
    for name, v in (("f1_loc", f1_loc), ("f1_class", f1_class)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    return LOC_WEIGHT * f1_loc + CLASS_WEIGHT * f1_class


@dataclass
class EvalResult:
    f1_loc: float
    f1_per_class: tuple
    f1_class: float
    score: float
    pixel_counts: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "f1_loc": self.f1_loc,
            "f1_per_class": list(self.f1_per_class),
            "f1_class": self.f1_class,
            "score": self.score,
        }
        if self.pixel_counts is not None:
            out["pixel_counts"] = self.pixel_counts.tolist()
        return out


def result_from_counts(counts: np.ndarray) -> EvalResult:
    f1l = f1_localization(counts)
    per_class, f1c = f1_damage(counts)
    return EvalResult(f1_loc=f1l, f1_per_class=tuple(per_class), f1_class=f1c,
                      score=weighted_score(f1l, f1c), pixel_counts=counts)


def evaluate_dataset(scenes) -> EvalResult:
    """Micro-averaged evaluation over (pred mask, truth mask) pairs."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("evaluate_dataset needs at least one scene")
    total = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for pred, truth in scenes:
        total += confusion_counts(pred, truth)
    return result_from_counts(total)

"""Scene ingestion, polygon rasterization, damage histograms and fold splitting.

Masks are single-channel uint8 arrays with values 0..4:
0 no-building, 1 no-damage, 2 minor, 3 major, 4 destroyed.
Polygons carry damage labels 1..4; class 0 is background only.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import cv2
import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

from .exceptions import DataError

NUM_CLASSES = 5
DAMAGE_CLASSES = (1, 2, 3, 4)


class DamageClass(IntEnum):
    NO_BUILDING = 0
    NO_DAMAGE = 1
    MINOR = 2
    MAJOR = 3
    DESTROYED = 4


@dataclass(frozen=True)
class BuildingAnnotation:
    """One building polygon (pixel coordinates, x right / y down) with a damage label 1..4."""

    polygon: tuple  # ((x, y), ...) with >= 3 vertices, sub-pixel allowed
    damage: int

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise DataError(f"polygon needs >= 3 vertices, got {len(self.polygon)}")
        if self.damage not in DAMAGE_CLASSES:
            raise DataError(f"damage label must be in 1..4, got {self.damage}")


@dataclass
class SceneRecord:
    scene_id: str
    disaster_id: str
    pre_image: str
    post_image: str
    width: int
    height: int
    annotations: list = field(default_factory=list)


@dataclass
class RasterPair:
    """Aligned pre/post uint8 H x W x 3 rasters plus the uint8 H x W class mask."""

    pre: np.ndarray
    post: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not (self.pre.shape == self.post.shape and self.pre.shape[:2] == self.mask.shape):
            raise DataError(
                f"raster shapes disagree: pre {self.pre.shape}, post {self.post.shape}, "
                f"mask {self.mask.shape}"
            )
        if self.mask.max(initial=0) > 4:
            raise DataError("mask values must be in 0..4")


@dataclass
class FoldAssignment:
    folds: dict  # scene_id -> fold index in 0..k-1
    k: int
    seed: int

    def scenes_in_fold(self, fold_id: int) -> list:
        return sorted(s for s, f in self.folds.items() if f == fold_id)

    def scenes_outside_fold(self, fold_id: int) -> list:
        return sorted(s for s, f in self.folds.items() if f != fold_id)


def _validate_annotation_geometry(ann: BuildingAnnotation, width: int, height: int,
                                  margin: float = 32.0) -> None:
    xs = [p[0] for p in ann.polygon]
    ys = [p[1] for p in ann.polygon]
    if min(xs) < -margin or max(xs) > width + margin or min(ys) < -margin or max(ys) > height + margin:
        raise DataError(f"polygon vertices outside image bounds (+/-{margin}px): "
                        f"x in [{min(xs)}, {max(xs)}], y in [{min(ys)}, {max(ys)}]")
    poly = ShapelyPolygon(ann.polygon)
    if poly.area > 0 and not poly.is_valid:
        raise DataError("polygon is self-intersecting")


def ingest_manifest(manifest_path: str) -> list:
    """Load a JSON manifest into validated SceneRecords.

    The manifest is a top-level list of scene objects with fields scene_id,
    disaster_id, pre_image, post_image, width, height and buildings
    (list of {polygon: [[x, y], ...], damage: 1..4}). Image paths are resolved
    relative to the manifest file.
    """
    try:
        with open(manifest_path) as fh:
            entries = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise DataError("manifest must be a top-level JSON list of scenes")

    base = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    seen = set()
    for entry in entries:
        try:
            scene_id = entry["scene_id"]
            record = SceneRecord(
                scene_id=scene_id,
                disaster_id=entry["disaster_id"],
                pre_image=os.path.join(base, entry["pre_image"]),
                post_image=os.path.join(base, entry["post_image"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                annotations=[
                    BuildingAnnotation(polygon=tuple(tuple(p) for p in b["polygon"]),
                                       damage=int(b["damage"]))
                    for b in entry.get("buildings", [])
                ],
            )
        except KeyError as exc:
            raise DataError(f"manifest entry missing field {exc}") from exc
        if scene_id in seen:
            raise DataError(f"duplicate scene_id in manifest: {scene_id}")
        seen.add(scene_id)
        for img in (record.pre_image, record.post_image):
            if not os.path.isfile(img):
                raise DataError(f"scene {scene_id}: image file not found: {img}")
        for ann in record.annotations:
            _validate_annotation_geometry(ann, record.width, record.height)
        records.append(record)
    return records


def _polygon_interior(polygon: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean H x W array: pixel centers (x+0.5, y+0.5) covered by the polygon.

    Even-odd crossing rule with half-open edge spans, so centers exactly on a
    shared edge belong to exactly one of the two polygons (top-left convention).
    """
    xs = polygon[:, 0]
    ys = polygon[:, 1]
    x0 = max(int(np.floor(xs.min() - 0.5)), 0)
    x1 = min(int(np.ceil(xs.max() + 0.5)), width)
    y0 = max(int(np.floor(ys.min() - 0.5)), 0)
    y1 = min(int(np.ceil(ys.max() + 0.5)), height)
    if x0 >= x1 or y0 >= y1:
        return np.zeros((height, width), dtype=bool)

    cx = np.arange(x0, x1, dtype=np.float64) + 0.5
    cy = np.arange(y0, y1, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(cx, cy)

    inside = np.zeros(gx.shape, dtype=bool)
    n = len(polygon)
    for i in range(n):
        xa, ya = xs[i], ys[i]
        xb, yb = xs[(i + 1) % n], ys[(i + 1) % n]
        if ya == yb:
            continue
        spans = (ya <= gy) != (yb <= gy)
        with np.errstate(invalid="ignore"):
            x_at = xa + (gy - ya) * (xb - xa) / (yb - ya)
        inside ^= spans & (gx < x_at)

    full = np.zeros((height, width), dtype=bool)
    full[y0:y1, x0:x1] = inside
    return full


def rasterize_annotations(annotations, width: int, height: int) -> np.ndarray:
    """Rasterize polygon annotations into a uint8 damage mask.

    A pixel gets a polygon's damage value iff its center lies inside the
    polygon; overlaps resolve by maximum damage. Degenerate (zero-area)
    polygons are skipped with a warning.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"width and height must be positive, got {width}x{height}")
    mask = np.zeros((height, width), dtype=np.uint8)
    for ann in annotations:
        poly = np.asarray(ann.polygon, dtype=np.float64)
        # shoelace area
        area = 0.5 * abs(np.dot(poly[:, 0], np.roll(poly[:, 1], -1))
                         - np.dot(poly[:, 1], np.roll(poly[:, 0], -1)))
        if area == 0.0:
            warnings.warn(f"skipping degenerate zero-area polygon (damage {ann.damage})")
            continue
        inside = _polygon_interior(poly, width, height)
        np.putmask(mask, inside & (mask < ann.damage), np.uint8(ann.damage))
    return mask


def damage_histogram(record: SceneRecord) -> np.ndarray:
    """Count buildings per damage class 1..4; counts[c-1] is the count for class c."""
    counts = np.zeros(4, dtype=np.int64)
    for ann in record.annotations:
        counts[ann.damage - 1] += 1
    return counts


def split_folds(records, k: int, seed: int) -> FoldAssignment:
    """Greedy multi-label stratified split of scenes into k folds.

    Scenes are processed from the rarest damage class outward; each scene goes
    to the fold with the greatest remaining need for the scene's rarest label,
    ties broken by fold size then by a seeded shuffle. Deterministic per seed.
    """
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    if len(records) < k:
        raise ValueError(f"need at least {k} scenes for {k} folds, got {len(records)}")
    ids = [r.scene_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate scene_ids passed to split_folds")

    rng = np.random.default_rng(seed)
    hists = {r.scene_id: damage_histogram(r) for r in records}
    global_counts = np.sum(list(hists.values()), axis=0)

    # rarest label of a scene = the present label with the smallest global count
    label_rarity = np.argsort(global_counts, kind="stable")

    def rarest_label(h):
        for lab in label_rarity:
            if h[lab] > 0:
                return int(lab)
        return -1  # no buildings at all

    order = sorted(
        records,
        key=lambda r: (
            # scenes holding globally rarer labels first, then scenes with more of it
            global_counts[rarest_label(hists[r.scene_id])] if rarest_label(hists[r.scene_id]) >= 0 else np.iinfo(np.int64).max,
            -hists[r.scene_id][rarest_label(hists[r.scene_id])] if rarest_label(hists[r.scene_id]) >= 0 else 0,
            r.scene_id,
        ),
    )

    need = np.tile(global_counts.astype(np.float64) / k, (k, 1))
    fold_sizes = np.zeros(k, dtype=np.int64)
    jitter = rng.random(k) * 1e-9  # seeded deterministic tie-break
    assignment = {}
    for rec in order:
        h = hists[rec.scene_id]
        lab = rarest_label(h)
        if lab >= 0:
            score = need[:, lab] - fold_sizes * 1e-6 + jitter
        else:
            score = -fold_sizes.astype(np.float64) + jitter
        fold = int(np.argmax(score))
        assignment[rec.scene_id] = fold
        need[fold] -= h
        fold_sizes[fold] += 1

    # guarantee non-empty folds when there are enough scenes
    for fold in range(k):
        if fold_sizes[fold] == 0:
            donor = int(np.argmax(fold_sizes))
            moved = next(s for s, f in assignment.items() if f == donor)
            assignment[moved] = fold
            fold_sizes[donor] -= 1
            fold_sizes[fold] += 1
    return FoldAssignment(folds=assignment, k=k, seed=seed)


def write_folds_csv(assignment: FoldAssignment, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "fold"])
        for scene_id in sorted(assignment.folds):
            writer.writerow([scene_id, assignment.folds[scene_id]])


def read_folds_csv(path: str, seed: int = 0) -> FoldAssignment:
    folds = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            folds[row["scene_id"]] = int(row["fold"])
    if not folds:
        raise DataError(f"empty fold assignment file: {path}")
    return FoldAssignment(folds=folds, k=max(folds.values()) + 1, seed=seed)


def save_mask_png(mask: np.ndarray, path: str) -> None:
    """Write a class mask as single-channel 8-bit PNG with raw values 0..4."""
    if not cv2.imwrite(path, mask.astype(np.uint8)):
        raise OSError(f"cannot write mask to {path}")


def load_mask_png(path: str) -> np.ndarray:
    mask = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise DataError(f"cannot read mask {path}")
    if mask.max(initial=0) > 4:
        raise DataError(f"mask {path} holds values outside 0..4")
    return mask


def save_image_png(image: np.ndarray, path: str) -> None:
    if not cv2.imwrite(path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write image to {path}")


def load_image_png(path: str) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def load_raster_pair(record: SceneRecord) -> RasterPair:
    """Read a scene's images from disk and rasterize its annotations."""
    pre = load_image_png(record.pre_image)
    post = load_image_png(record.post_image)
    mask = rasterize_annotations(record.annotations, record.width, record.height)
    return RasterPair(pre=pre, post=post, mask=mask)

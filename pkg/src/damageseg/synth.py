"""Synthetic pre/post disaster scene generator.

Renders rectangular "buildings" on a textured background. The post image
re-renders each building with a visual signature of its damage class, then
applies a global misregistration jitter and photometric drift:

  class 1  unchanged roof
  class 2  roof reddened (green/blue channels cut to 55%)
  class 3  roof darkened to 40% brightness plus heavy speckle
  class 4  building removed (background shows through)

Everything is driven by a single integer seed; identical (seed, config)
pairs produce bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .dataset import BuildingAnnotation, RasterPair, SceneRecord, rasterize_annotations
from .exceptions import DataError

# per-class RGB gains on the roof color; class 4 is removal, not recoloring
CLASS_GAIN = {1: (1.0, 1.0, 1.0), 2: (1.05, 0.55, 0.55), 3: (0.4, 0.4, 0.4)}
SPECKLE = {1: 0.0, 2: 0.0, 3: 35.0}


@dataclass
class SynthConfig:
    size: int = 128
    min_buildings: int = 4
    max_buildings: int = 10
    # exact per-class building counts (classes 1..4); overrides the count range
    damage_counts: tuple | None = None
    # sampling probabilities for classes 1..4 when damage_counts is unset
    damage_probs: tuple = (0.4, 0.2, 0.2, 0.2)
    min_building_px: int = 12
    max_building_px: int = 26
    jitter_shift_px: float = 1.0
    jitter_rotation_deg: float = 0.5
    drift_brightness: float = 8.0
    drift_contrast: float = 0.05
    placement_attempts: int = 200


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.full((size, size, 3), (72.0, 78.0, 66.0))
    low = rng.uniform(-18, 18, size=(size // 8, size // 8, 3))
    low = cv2.resize(low, (size, size), interpolation=cv2.INTER_LINEAR)
    noise = rng.uniform(-6, 6, size=(size, size, 3))
    return np.clip(base + low + noise, 0, 255)


def _place_buildings(rng: np.random.Generator, cfg: SynthConfig, damages: list) -> list:
    """Place non-overlapping axis-aligned rectangles; DataError if they don't fit."""
    placed = []
    boxes = []
    for damage in damages:
        for _ in range(cfg.placement_attempts):
            w = rng.uniform(cfg.min_building_px, cfg.max_building_px)
            h = rng.uniform(cfg.min_building_px, cfg.max_building_px)
            x = rng.uniform(2, cfg.size - w - 2)
            y = rng.uniform(2, cfg.size - h - 2)
            box = (x - 2, y - 2, x + w + 2, y + h + 2)
            if all(box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1]
                   for b in boxes):
                boxes.append(box)
                polygon = ((x, y), (x + w, y), (x + w, y + h), (x, y + h))
                placed.append(BuildingAnnotation(polygon=polygon, damage=damage))
                break
        else:
            raise DataError(
                f"cannot place {len(damages)} buildings of up to {cfg.max_building_px}px "
                f"on a {cfg.size}px image without overlap")
    return placed


def _render(rng_tex: np.random.Generator, background: np.ndarray,
            annotations, post: bool) -> np.ndarray:
    """Draw buildings over the background; texture draws come from rng_tex."""
    img = background.copy()
    size = img.shape[0]
    for ann in annotations:
        roof = rng_tex.uniform(165, 235, size=3)
        texture = rng_tex.uniform(-10, 10, size=(size, size))
        speckle = rng_tex.normal(0, 1, size=(size, size))
        if post and ann.damage == 4:
            continue  # destroyed: background shows through
        footprint = rasterize_annotations([ann], size, size) > 0
        gain = np.asarray(CLASS_GAIN[ann.damage]) if post else np.ones(3)
        noise_amp = SPECKLE[ann.damage] if post else 0.0
        shade = (roof[None, :] * gain[None, :]
                 + texture[footprint, None]
                 + noise_amp * speckle[footprint, None])
        img[footprint] = np.clip(shade, 0, 255)
    return img


def generate_synthetic_scene(seed: int, config: SynthConfig | None = None):
    """Build one synthetic scene; returns (SceneRecord, RasterPair).

    The record's image paths are empty: callers that need files on disk
    write the rasters themselves (see the `synth` CLI command).
    """
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)

    if cfg.damage_counts is not None:
        damages = [c + 1 for c, n in enumerate(cfg.damage_counts) for _ in range(n)]
    else:
        n = int(rng.integers(cfg.min_buildings, cfg.max_buildings + 1))
        probs = np.asarray(cfg.damage_probs, dtype=np.float64)
        damages = [int(d) for d in rng.choice([1, 2, 3, 4], size=n, p=probs / probs.sum())]
    annotations = _place_buildings(rng, cfg, damages)

    background = _background(rng, cfg.size)
    # one texture stream reused for both epochs so intact buildings match
    tex_seed = int(rng.integers(0, 2**31))
    pre = _render(np.random.default_rng(tex_seed), background, annotations, post=False)
    post = _render(np.random.default_rng(tex_seed), background, annotations, post=True)

    # misregistration jitter on the post image
    angle = rng.uniform(-cfg.jitter_rotation_deg, cfg.jitter_rotation_deg)
    dx = rng.uniform(-cfg.jitter_shift_px, cfg.jitter_shift_px)
    dy = rng.uniform(-cfg.jitter_shift_px, cfg.jitter_shift_px)
    if angle != 0.0 or dx != 0.0 or dy != 0.0:
        center = (cfg.size / 2.0, cfg.size / 2.0)
        mat = cv2.getRotationMatrix2D(center, angle, 1.0)
        mat[:, 2] += (dx, dy)
        post = cv2.warpAffine(post, mat, (cfg.size, cfg.size),
                              flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)

    # photometric drift
    gain = 1.0 + rng.uniform(-cfg.drift_contrast, cfg.drift_contrast)
    bias = rng.uniform(-cfg.drift_brightness, cfg.drift_brightness)
    post = np.clip(post * gain + bias, 0, 255)

    mask = rasterize_annotations(annotations, cfg.size, cfg.size)
    record = SceneRecord(
        scene_id=f"synth-{seed:06d}",
        disaster_id="synth",
        pre_image="",
        post_image="",
        width=cfg.size,
        height=cfg.size,
        annotations=annotations,
    )
    pair = RasterPair(pre=pre.astype(np.uint8), post=post.astype(np.uint8), mask=mask)
    return record, pair


def generate_dataset(n_scenes: int, seed: int, config: SynthConfig | None = None):
    """Generate n scenes with seeds seed, seed+1, ..., seed+n-1."""
    scenes = [generate_synthetic_scene(seed + i, config) for i in range(n_scenes)]
    records = [r for r, _ in scenes]
    pairs = {r.scene_id: p for r, p in scenes}
    return records, pairs

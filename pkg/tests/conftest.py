import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make oracles/reference_tables importable

from damageseg.dataset import BuildingAnnotation, RasterPair, save_image_png
from damageseg.synth import SynthConfig, generate_dataset


def rect(x0, y0, x1, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


@pytest.fixture
def small_pair():
    rng = np.random.default_rng(42)
    pre = rng.integers(0, 255, (64, 64, 3)).astype(np.uint8)
    post = rng.integers(0, 255, (64, 64, 3)).astype(np.uint8)
    mask = rng.integers(0, 5, (64, 64)).astype(np.uint8)
    return RasterPair(pre=pre, post=post, mask=mask)


@pytest.fixture(scope="session")
def synth_scenes():
    cfg = SynthConfig(size=128, damage_counts=(3, 2, 2, 2))
    return generate_dataset(8, seed=500, config=cfg)


def write_manifest(tmp_path, scenes):
    """Write scenes as (records, pairs) to disk in the manifest layout."""
    records, pairs = scenes
    os.makedirs(tmp_path / "images", exist_ok=True)
    entries = []
    for r in records:
        pair = pairs[r.scene_id]
        pre_rel = f"images/{r.scene_id}_pre.png"
        post_rel = f"images/{r.scene_id}_post.png"
        save_image_png(pair.pre, str(tmp_path / pre_rel))
        save_image_png(pair.post, str(tmp_path / post_rel))
        entries.append({
            "scene_id": r.scene_id, "disaster_id": r.disaster_id,
            "pre_image": pre_rel, "post_image": post_rel,
            "width": r.width, "height": r.height,
            "buildings": [{"polygon": [list(p) for p in a.polygon], "damage": a.damage}
                          for a in r.annotations],
        })
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries))
    return str(path)


@pytest.fixture
def annotation_factory():
    def make(polygon, damage):
        return BuildingAnnotation(polygon=tuple(tuple(p) for p in polygon), damage=damage)
    return make

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from damageseg.dataset import (BuildingAnnotation, damage_histogram, ingest_manifest,
                               rasterize_annotations, read_folds_csv, split_folds,
                               write_folds_csv)
from damageseg.exceptions import DataError
from damageseg.synth import SynthConfig, generate_dataset, generate_synthetic_scene

from conftest import rect, write_manifest
from oracles import rasterize_bruteforce


class TestIngestManifest:
    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("[]")
        assert ingest_manifest(str(path)) == []

    def test_round_trip_preserves_ids(self, tmp_path, synth_scenes):
        records, pairs = synth_scenes
        path = write_manifest(tmp_path, (records[:2], pairs))
        loaded = ingest_manifest(path)
        assert [r.scene_id for r in loaded] == [r.scene_id for r in records[:2]]
        assert loaded[0].annotations == records[0].annotations

    def test_missing_post_image_names_scene(self, tmp_path, synth_scenes):
        records, pairs = synth_scenes
        path = write_manifest(tmp_path, (records[:1], pairs))
        entries = json.loads(open(path).read())
        entries[0]["post_image"] = "images/nowhere.png"
        open(path, "w").write(json.dumps(entries))
        with pytest.raises(DataError, match=records[0].scene_id) as exc:
            ingest_manifest(path)
        assert "nowhere.png" in str(exc.value)

    def test_duplicate_scene_id(self, tmp_path, synth_scenes):
        records, pairs = synth_scenes
        path = write_manifest(tmp_path, (records[:1], pairs))
        entries = json.loads(open(path).read())
        open(path, "w").write(json.dumps(entries * 2))
        with pytest.raises(DataError, match="duplicate"):
            ingest_manifest(path)

    def test_too_few_vertices_rejected(self):
        with pytest.raises(DataError, match="3 vertices"):
            BuildingAnnotation(polygon=((0, 0), (1, 1)), damage=2)


class TestRasterize:
    def test_no_buildings(self):
        assert not rasterize_annotations([], 64, 64).any()

    def test_rectangle_against_oracle(self, annotation_factory):
        anns = [annotation_factory(rect(2, 2, 6, 5), 4)]
        mask = rasterize_annotations(anns, 16, 16)
        assert (mask == rasterize_bruteforce(anns, 16, 16)).all()
        # centers strictly inside (2,2)-(6,5): x in {2,3,4,5}, y in {2,3,4}
        assert mask.sum() == 4 * 4 * 3
        assert set(np.unique(mask)) == {0, 4}

    def test_overlap_takes_max_damage(self, annotation_factory):
        anns = [annotation_factory(rect(1, 1, 8, 8), 1),
                annotation_factory(rect(4, 4, 12, 12), 3)]
        mask = rasterize_annotations(anns, 16, 16)
        assert (mask == rasterize_bruteforce(anns, 16, 16)).all()
        assert (mask[4:8, 4:8] == 3).all()

    def test_order_independent(self, annotation_factory):
        anns = [annotation_factory(rect(1, 1, 8, 8), 1),
                annotation_factory(rect(4, 4, 12, 12), 3)]
        assert (rasterize_annotations(anns, 16, 16)
                == rasterize_annotations(anns[::-1], 16, 16)).all()

    def test_degenerate_polygon_skipped_with_warning(self, annotation_factory):
        anns = [annotation_factory(((2, 2), (6, 2), (4, 2)), 4)]
        with pytest.warns(UserWarning, match="degenerate"):
            mask = rasterize_annotations(anns, 16, 16)
        assert not mask.any()

    def test_bad_size_rejected(self):
        with pytest.raises(ValueError):
            rasterize_annotations([], 0, 16)

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_random_polygons_match_oracle(self, data):
        rng_seed = data.draw(st.integers(0, 10**6))
        rng = np.random.default_rng(rng_seed)
        size = int(rng.integers(8, 48))
        anns = []
        for _ in range(int(rng.integers(1, 6))):
            # random triangles/quads, convex by construction (sorted by angle)
            n = int(rng.integers(3, 6))
            pts = rng.uniform(-2, size + 2, size=(n, 2))
            center = pts.mean(axis=0)
            order = np.argsort(np.arctan2(*(pts - center).T[::-1]))
            poly = tuple(tuple(p) for p in pts[order])
            try:
                anns.append(BuildingAnnotation(polygon=poly,
                                               damage=int(rng.integers(1, 5))))
            except DataError:
                continue
        mask = rasterize_annotations(anns, size, size)
        assert (mask == rasterize_bruteforce(anns, size, size)).all()


class TestDamageHistogram:
    def test_empty(self, synth_scenes):
        record, _ = generate_synthetic_scene(0, SynthConfig(damage_counts=(0, 0, 0, 0)))
        assert (damage_histogram(record) == 0).all()

    def test_counting(self, annotation_factory):
        from damageseg.dataset import SceneRecord
        record = SceneRecord("s", "d", "", "", 32, 32, [
            annotation_factory(rect(1, 1, 4, 4), 1),
            annotation_factory(rect(6, 6, 9, 9), 1),
            annotation_factory(rect(12, 12, 15, 15), 4)])
        assert damage_histogram(record).tolist() == [2, 0, 0, 1]

    def test_generator_round_trip(self):
        record, _ = generate_synthetic_scene(9, SynthConfig(damage_counts=(3, 2, 1, 2)))
        assert damage_histogram(record).tolist() == [3, 2, 1, 2]


class TestSplitFolds:
    def _identical_records(self, n):
        cfg = SynthConfig(size=96, damage_counts=(2, 1, 1, 1))
        return [generate_synthetic_scene(i, cfg)[0] for i in range(n)]

    def test_identical_histograms_balanced(self):
        records = self._identical_records(10)
        assignment = split_folds(records, 5, seed=3)
        sizes = np.bincount(list(assignment.folds.values()), minlength=5)
        assert sizes.tolist() == [2] * 5

    def test_deterministic(self):
        records = self._identical_records(12)
        a = split_folds(records, 4, seed=17)
        b = split_folds(records, 4, seed=17)
        assert a.folds == b.folds

    def test_partition(self):
        records, _ = generate_dataset(30, seed=7,
                                      config=SynthConfig(size=96, max_buildings=6,
                                                         max_building_px=20))
        assignment = split_folds(records, 5, seed=1)
        assert sorted(assignment.folds) == sorted(r.scene_id for r in records)
        assert set(assignment.folds.values()) <= set(range(5))
        assert all((np.bincount(list(assignment.folds.values()), minlength=5)) > 0)

    def test_argument_errors(self):
        records = self._identical_records(3)
        with pytest.raises(ValueError):
            split_folds(records, 1, seed=0)
        with pytest.raises(ValueError):
            split_folds(records, 4, seed=0)

    def test_csv_round_trip(self, tmp_path):
        records = self._identical_records(6)
        assignment = split_folds(records, 3, seed=0)
        path = tmp_path / "folds.csv"
        write_folds_csv(assignment, str(path))
        loaded = read_folds_csv(str(path))
        assert loaded.folds == assignment.folds


class TestSyntheticGenerator:
    def test_bitwise_deterministic(self):
        a = generate_synthetic_scene(77, SynthConfig())
        b = generate_synthetic_scene(77, SynthConfig())
        assert (a[1].pre == b[1].pre).all()
        assert (a[1].post == b[1].post).all()
        assert (a[1].mask == b[1].mask).all()
        assert a[0].annotations == b[0].annotations

    def test_all_class_one(self):
        cfg = SynthConfig(damage_counts=(5, 0, 0, 0), jitter_shift_px=0.0,
                          jitter_rotation_deg=0.0, drift_brightness=0.0,
                          drift_contrast=0.0)
        _, pair = generate_synthetic_scene(5, cfg)
        assert set(np.unique(pair.mask)) <= {0, 1}
        assert (pair.pre == pair.post).all()  # no jitter, no drift, no damage

    def test_mask_matches_rasterizer(self):
        record, pair = generate_synthetic_scene(13, SynthConfig())
        expected = rasterize_annotations(record.annotations, record.width, record.height)
        assert (pair.mask == expected).all()

    def test_histogram_round_trip(self):
        cfg = SynthConfig(min_buildings=8, max_buildings=8)
        record, _ = generate_synthetic_scene(21, cfg)
        assert damage_histogram(record).sum() == 8

    def test_impossible_placement_raises(self):
        cfg = SynthConfig(size=48, damage_counts=(20, 20, 20, 20))
        with pytest.raises(DataError, match="cannot place"):
            generate_synthetic_scene(0, cfg)

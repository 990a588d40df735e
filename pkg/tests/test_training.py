import numpy as np
import pytest

from damageseg.dataset import FoldAssignment, split_folds
from damageseg.exceptions import ConfigError
from damageseg.model import ModelConfig, load_checkpoint
from damageseg.synth import SynthConfig, generate_dataset
from damageseg.training import Checkpoint, TrainConfig, lr_at, predict_scene, train_fold

TINY_MODEL = ModelConfig(mode="siamese-concat", encoder="tiny-a", decoder="unet",
                         decoder_width=8)


def quick_config(**kw):
    base = dict(epochs=2, batch_size=4, crop=64, val_size=128, augmentation="none",
                aug_overrides={"shared_spatial": {"random_crop": True}},
                crops_per_scene=1, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_dataset():
    cfg = SynthConfig(size=128, damage_counts=(2, 1, 1, 1), jitter_shift_px=0.0,
                      jitter_rotation_deg=0.0)
    records, pairs = generate_dataset(6, seed=300, config=cfg)
    folds = split_folds(records, 3, seed=0)
    return records, pairs, folds


class TestLrSchedule:
    def test_endpoints_exact(self):
        assert lr_at(0, 1000, 1e-3, 1e-6) == 1e-3
        assert lr_at(1000, 1000, 1e-3, 1e-6) == 1e-6

    def test_midpoint(self):
        assert lr_at(500, 1000, 1e-3, 1e-6) == pytest.approx((1e-3 + 1e-6) / 2, abs=1e-12)

    def test_monotone_decreasing(self):
        values = [lr_at(s, 100, 1e-3, 1e-6) for s in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(-1, 10, 1e-3, 1e-6)
        with pytest.raises(ValueError):
            lr_at(11, 10, 1e-3, 1e-6)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(base_lr=1e-4, min_lr=1e-3)
        with pytest.raises(ConfigError):
            TrainConfig(crop=512, val_size=256)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="sgd")


class TestTrainFold:
    def test_single_epoch_returns_epoch_one_checkpoint(self, tiny_dataset):
        records, pairs, folds = tiny_dataset
        ckpt = train_fold(records, folds, 0, TINY_MODEL, quick_config(epochs=1),
                          pairs=pairs)
        assert ckpt.epoch == 0
        assert len(ckpt.history) == 1
        assert ckpt.val_result.score == ckpt.history[0].score

    def test_deterministic_first_epoch_loss(self, tiny_dataset):
        records, pairs, folds = tiny_dataset
        a = train_fold(records, folds, 0, TINY_MODEL, quick_config(epochs=1), pairs=pairs)
        b = train_fold(records, folds, 0, TINY_MODEL, quick_config(epochs=1), pairs=pairs)
        assert a.train_losses[0] == pytest.approx(b.train_losses[0], abs=1e-6)

    def test_checkpoint_is_history_maximum(self, tiny_dataset):
        records, pairs, folds = tiny_dataset
        ckpt = train_fold(records, folds, 0, TINY_MODEL, quick_config(epochs=3),
                          pairs=pairs)
        assert ckpt.val_result.score == max(r.score for r in ckpt.history)

    def test_no_validation_leakage(self, tiny_dataset):
        records, pairs, folds = tiny_dataset
        val_scenes = set(folds.scenes_in_fold(1))
        seen = []
        train_fold(records, folds, 1, TINY_MODEL, quick_config(epochs=2), pairs=pairs,
                   batch_callback=lambda ids: seen.extend(ids))
        assert seen
        assert not (set(seen) & val_scenes)

    def test_stored_score_matches_recomputation(self, tiny_dataset, tmp_path):
        records, pairs, folds = tiny_dataset
        ckpt = train_fold(records, folds, 0, TINY_MODEL, quick_config(epochs=2),
                          pairs=pairs)
        from damageseg.metrics import evaluate_dataset
        recomputed = evaluate_dataset(
            (predict_scene(ckpt.model, pairs[sid]), pairs[sid].mask)
            for sid in folds.scenes_in_fold(0))
        assert recomputed.score == pytest.approx(ckpt.val_result.score, abs=1e-6)

    def test_checkpoint_save_load_round_trip(self, tiny_dataset, tmp_path):
        records, pairs, folds = tiny_dataset
        ckpt = train_fold(records, folds, 0, TINY_MODEL, quick_config(epochs=1),
                          pairs=pairs)
        path = str(tmp_path / "ckpt.pt")
        ckpt.save(path)
        model, payload = load_checkpoint(path)
        assert payload["val_result"]["score"] == pytest.approx(ckpt.val_result.score)
        assert payload["extra"]["score_history"] == [r.score for r in ckpt.history]

    def test_bad_fold_id(self, tiny_dataset):
        records, pairs, folds = tiny_dataset
        with pytest.raises(ConfigError):
            train_fold(records, folds, 7, TINY_MODEL, quick_config(), pairs=pairs)

    def test_empty_split_rejected(self, tiny_dataset):
        records, pairs, _ = tiny_dataset
        lopsided = FoldAssignment(folds={r.scene_id: 0 for r in records}, k=2, seed=0)
        with pytest.raises(ConfigError, match="empty"):
            train_fold(records, lopsided, 0, TINY_MODEL, quick_config(), pairs=pairs)

    def test_writes_training_log(self, tiny_dataset, tmp_path):
        records, pairs, folds = tiny_dataset
        out = tmp_path / "run"
        train_fold(records, folds, 0, TINY_MODEL, quick_config(epochs=2), pairs=pairs,
                   out_dir=str(out))
        lines = (out / "training_log.csv").read_text().strip().splitlines()
        assert lines[0].startswith("epoch,")
        assert len(lines) == 3

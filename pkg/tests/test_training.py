"""Tests for optimizers, the training loop and checkpoints."""

import csv

import numpy as np
import pytest

from src.services.adan import EmbeddingModel, forward_backward
from src.services.network import ModelHyper
from src.services.dsp import StftConfig, stft
from src.services.training import (MAX_CONSECUTIVE_DIVERGENCES, SGD, Adam, TrainingExample, _clip,
                                   fit_feature_stats, load_checkpoint, make_optimizer, reference_examples,
                                   save_checkpoint, select_training_beams, train, train_step, write_loss_csv)
from src.utils.errors import CompatibilityError, DivergenceError, InputError


def _model(seed=0):
    return EmbeddingModel.create(ModelHyper(num_freq=5, embedding_dim=3, num_anchors=3, hidden=4, layers=1),
                                 seed=seed)


def _example(seed=0, T=6, F=5):
    rng = np.random.default_rng(seed)
    refs = rng.uniform(0.0, 0.5, (2, T, F))
    beam = refs.sum(axis=0) + rng.uniform(0.0, 0.1, (T, F))
    return TrainingExample(np.log(beam), beam, refs, f"utt{seed}", 0)


class TestOptimizers:
    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped = _clip(grads, 1.0)
        assert np.sqrt(clipped["a"][0] ** 2 + clipped["b"][0] ** 2) == pytest.approx(1.0)
        assert _clip(grads, 10.0) is grads

    def test_sgd_step(self):
        tensors = {"w": np.array([1.0, 2.0])}
        SGD(0.5, clip_norm=100.0).step(tensors, {"w": np.array([2.0, -2.0])})
        np.testing.assert_allclose(tensors["w"], [0.0, 3.0])

    def test_adam_first_step_is_sign(self):
        tensors = {"w": np.array([1.0, 1.0])}
        Adam(0.1, clip_norm=100.0).step(tensors, {"w": np.array([0.3, -7.0])})
        np.testing.assert_allclose(tensors["w"], [0.9, 1.1], atol=1e-6)

    def test_make_optimizer(self):
        assert isinstance(make_optimizer("sgd", 0.1, 1.0), SGD)
        assert isinstance(make_optimizer("adam", 0.1, 1.0), Adam)
        with pytest.raises(InputError, match="Unknown optimizer"):
            make_optimizer("rmsprop", 0.1, 1.0)


class TestTrainStep:
    def test_loss_is_batch_mean(self):
        model = _model()
        batch = [_example(0), _example(1)]
        expected = np.mean([forward_backward(model, ex.features, ex.beam_magnitude, ex.references, 2,
                                             compute_grads=False).loss for ex in batch])
        assert train_step(model, batch, SGD(0.0), salient=2) == pytest.approx(expected)

    def test_divergence_leaves_model_untouched(self):
        model = _model()
        before = {k: v.copy() for k, v in model.tensors().items()}
        bad = _example(0)
        bad = TrainingExample(np.full_like(bad.features, np.nan), bad.beam_magnitude, bad.references)
        with pytest.raises(DivergenceError):
            train_step(model, [bad], SGD(0.1), salient=2)
        for name, value in model.tensors().items():
            np.testing.assert_array_equal(value, before[name])

    def test_empty_batch(self):
        with pytest.raises(InputError):
            train_step(_model(), [], SGD(0.1), salient=2)


class TestTrainLoop:
    def test_loss_decreases(self):
        model = _model(3)
        losses = train(model, [_example(0)], steps=20, optimizer=SGD(0.05), salient=2, log_every=0)
        assert len(losses) == 20
        assert losses[-1] < losses[0]

    def test_loss_decreases_steadily(self):
        losses = train(_model(3), [_example(0)], steps=200, optimizer=SGD(0.1), salient=2, log_every=0)
        decreasing = np.mean(np.diff(losses) < 0)
        assert decreasing >= 0.9
        assert losses[-1] < losses[0]

    @pytest.mark.parametrize("optimizer", [SGD(0.0), Adam(0.0)])
    def test_zero_step_size_leaves_model_unchanged(self, optimizer):
        model = _model(4)
        before = {k: v.copy() for k, v in model.tensors().items()}
        losses = train(model, [_example(0)], 4, optimizer, salient=2, log_every=0)
        for name, value in model.tensors().items():
            np.testing.assert_array_equal(value, before[name])
        assert len(set(losses)) == 1

    def test_deterministic(self):
        examples = [_example(i) for i in range(3)]
        a = train(_model(), examples, 5, Adam(1e-2), salient=2, seed=4, log_every=0)
        b = train(_model(), examples, 5, Adam(1e-2), salient=2, seed=4, log_every=0)
        assert a == b

    def test_persistent_divergence_raises(self):
        bad = _example(0)
        bad = TrainingExample(np.full_like(bad.features, np.nan), bad.beam_magnitude, bad.references)
        with pytest.raises(DivergenceError):
            train(_model(), [bad], MAX_CONSECUTIVE_DIVERGENCES + 5, SGD(0.1), salient=2, log_every=0)

    def test_rejected_steps_are_nan(self):
        bad = _example(0)
        bad = TrainingExample(np.full_like(bad.features, np.nan), bad.beam_magnitude, bad.references)
        losses = train(_model(), [bad], 3, SGD(0.1), salient=2, log_every=0)
        assert all(np.isnan(losses))

    def test_no_examples(self):
        with pytest.raises(InputError):
            train(_model(), [], 1, SGD(0.1), salient=2)


class TestTrainingData:
    def test_select_training_beams(self):
        refs = np.full((3, 2, 4, 5), 0.1)
        refs[1, 0] = 2.0
        refs[2, 1] = 3.0
        assert select_training_beams(refs) == [1, 2]

    def test_single_speaker_picks_loudest_beam(self):
        refs = np.ones((3, 1, 2, 2))
        refs[2] = 5.0
        assert select_training_beams(refs) == [2]

    def test_reference_examples(self):
        cfg = StftConfig(16, 4)
        rng = np.random.default_rng(0)
        sources = rng.standard_normal((2, 200))
        mix = stft(sources.sum(axis=0), cfg)
        refs = np.stack([stft(s, cfg).magnitude for s in sources])
        model = EmbeddingModel.create(ModelHyper(num_freq=cfg.num_bins, embedding_dim=3, num_anchors=3,
                                                 hidden=4, layers=1), seed=0)
        (example,) = reference_examples(model, "u", mix, refs)
        np.testing.assert_array_equal(example.beam_magnitude, mix.magnitude)
        np.testing.assert_array_equal(example.references, refs)
        assert example.features.shape == mix.magnitude.shape
        assert example.beam_index == -1
        forward_backward(model, example.features, example.beam_magnitude, example.references, 2,
                         compute_grads=False)

    def test_feature_stats(self):
        model = _model()
        examples = [_example(0), _example(1)]
        fit_feature_stats(model, examples)
        stacked = np.concatenate([ex.features for ex in examples])
        np.testing.assert_allclose(model.normalize(stacked).mean(axis=0), 0.0, atol=1e-12)
        assert np.all(model.feat_std >= 1e-3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = _model(7)
        model.feat_mean = np.arange(5.0)
        path = str(tmp_path / "model.npz")
        save_checkpoint(model, path, model_hash="m1", corpus_hash="c1", training_seed=9, steps=12,
                        acoustic_hash="a1")
        ckpt = load_checkpoint(path, "m1", "a1", "beams")
        assert ckpt.model.hyper == model.hyper
        assert (ckpt.training_seed, ckpt.steps) == (9, 12)
        assert (ckpt.corpus_hash, ckpt.acoustic_hash, ckpt.input_kind) == ("c1", "a1", "beams")
        for name, value in model.tensors().items():
            np.testing.assert_array_equal(ckpt.model.tensors()[name], value)
        np.testing.assert_array_equal(ckpt.model.feat_mean, model.feat_mean)
        ex = _example(2)
        assert forward_backward(ckpt.model, ex.features, ex.beam_magnitude, ex.references, 2,
                                compute_grads=False).loss == pytest.approx(
            forward_backward(model, ex.features, ex.beam_magnitude, ex.references, 2,
                             compute_grads=False).loss)

    def test_model_hash_mismatch(self, tmp_path):
        path = str(tmp_path / "model.npz")
        save_checkpoint(_model(), path, model_hash="m1", corpus_hash="c1")
        with pytest.raises(CompatibilityError, match="model config"):
            load_checkpoint(path, expected_model_hash="m2")

    def test_acoustic_hash_mismatch(self, tmp_path):
        path = str(tmp_path / "model.npz")
        save_checkpoint(_model(), path, model_hash="m1", corpus_hash="c1", acoustic_hash="a1")
        with pytest.raises(CompatibilityError, match="acoustic"):
            load_checkpoint(path, expected_acoustic_hash="a2")

    def test_corpus_hash_is_provenance_only(self, tmp_path):
        path = str(tmp_path / "model.npz")
        save_checkpoint(_model(), path, model_hash="m1", corpus_hash="c1", acoustic_hash="a1")
        assert load_checkpoint(path, "m1", "a1").corpus_hash == "c1"

    def test_input_kind_mismatch(self, tmp_path):
        path = str(tmp_path / "model.npz")
        save_checkpoint(_model(), path, input_kind="reference")
        assert load_checkpoint(path, expected_input="reference").input_kind == "reference"
        with pytest.raises(CompatibilityError, match="'reference' input"):
            load_checkpoint(path, expected_input="beams")

    def test_unknown_input_kind(self, tmp_path):
        with pytest.raises(InputError, match="model input"):
            save_checkpoint(_model(), str(tmp_path / "model.npz"), input_kind="stereo")

    def test_loss_csv(self, tmp_path):
        path = tmp_path / "loss.csv"
        write_loss_csv(str(path), [0.5, 0.25], "abc")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows == [{"step": "0", "loss": "0.50000000", "config_hash": "abc"},
                        {"step": "1", "loss": "0.25000000", "config_hash": "abc"}]

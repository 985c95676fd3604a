"""Tests for pipeline configuration loading, validation and hashing."""

import json

import pytest

from src.utils.config import PipelineConfig
from src.utils.errors import ConfigurationError


class TestLoad:
    def test_defaults(self):
        config = PipelineConfig.load()
        assert config.stft.frame_len == 256 and config.stft.hop == 64
        assert config.bank.num_beams == 12
        assert config.bank.target == "cardioid"
        assert config.training.optimizer == "adam"
        assert config.paths.dan_checkpoint_path == "dan_model.npz"

    def test_overrides_parse_json_values(self):
        config = PipelineConfig.load(overrides=["training.steps=7", "bank.target=hypercardioid",
                                                "model.recurrent=false"])
        assert config.training.steps == 7
        assert config.bank.target == "hypercardioid"
        assert config.model.recurrent is False

    def test_file_then_override(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"training": {"steps": 5, "seed": 3}}))
        config = PipelineConfig.load(str(path), ["training.steps=9"])
        assert (config.training.steps, config.training.seed) == (9, 3)

    def test_dump_round_trip(self, tmp_path):
        config = PipelineConfig.load(overrides=["corpus.count=4"])
        path = tmp_path / "out.json"
        config.dump(str(path))
        assert PipelineConfig.load(str(path)) == config

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            PipelineConfig.load(str(tmp_path / "nope.json"))

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError, match="not valid JSON"):
            PipelineConfig.load(str(path))

    @pytest.mark.parametrize("item", ["steps=3", "training.steps", "nosuch.key=1"])
    def test_bad_override(self, item):
        with pytest.raises(ConfigurationError):
            PipelineConfig.load(overrides=[item])

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="Unknown keys in 'model'"):
            PipelineConfig.from_dict({"model": {"depth": 3}})

    def test_unknown_section(self):
        with pytest.raises(ConfigurationError, match="sections"):
            PipelineConfig.from_dict({"mixer": {}})


class TestValidate:
    @pytest.mark.parametrize("override", [
        "stft.frame_len=255",
        "stft.hop=100",
        "bank.num_beams=1",
        "bank.f_max=5000",
        "bank.target=supercardioid",
        "model.num_anchors=2",
        "training.optimizer=rmsprop",
        "corpus.pool_size=1",
        "corpus.min_separation_deg=200",
        "selection.oracle_strategy=random",
    ])
    def test_rejects(self, override):
        with pytest.raises(ConfigurationError):
            PipelineConfig.load(overrides=[override])


class TestHashes:
    def test_stable(self):
        assert PipelineConfig.load().model_hash == PipelineConfig.load().model_hash

    def test_sections_scope_hashes(self):
        base = PipelineConfig.load()
        trained = PipelineConfig.load(overrides=["training.steps=1"])
        assert trained.model_hash == base.model_hash
        assert trained.corpus_hash == base.corpus_hash
        wider = PipelineConfig.load(overrides=["bank.num_beams=8"])
        assert wider.frontend_hash != base.frontend_hash
        assert wider.model_hash != base.model_hash
        assert wider.corpus_hash == base.corpus_hash

    def test_acoustic_hash_ignores_draws(self):
        base = PipelineConfig.load()
        for override in ("corpus.seed=3", "corpus.count=5", "corpus.pool_size=30", "corpus.num_speakers=3",
                         "corpus.source_dir=\"/data/dry\"", "training.steps=1"):
            other = PipelineConfig.load(overrides=[override])
            assert other.acoustic_hash == base.acoustic_hash, override
        assert PipelineConfig.load(overrides=["corpus.seed=3"]).corpus_hash != base.corpus_hash

    @pytest.mark.parametrize("override", ["corpus.rir_len=2048", "corpus.max_image_order=3",
                                          "stft.hop=128", "array.radius=0.05"])
    def test_acoustic_hash_tracks_acoustics(self, override):
        assert PipelineConfig.load(overrides=[override]).acoustic_hash != PipelineConfig.load().acoustic_hash

    def test_resolve(self, tmp_path):
        config = PipelineConfig.from_dict({"paths": {"work_dir": str(tmp_path), "bank_path": "/abs/bank.npz"}})
        assert config.resolve("corpus_dir") == tmp_path / "corpus"
        assert str(config.resolve("bank_path")) == "/abs/bank.npz"

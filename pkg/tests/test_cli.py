"""Tests for the command-line surface and its exit codes."""

import json

from click.testing import CliRunner

from cli import cli


def _args(tmp_path, *rest):
    config = {
        "stft": {"frame_len": 64, "hop": 16},
        "bank": {"num_beams": 4, "num_freqs": 8, "angle_step_deg": 10.0},
        "model": {"embedding_dim": 4, "num_anchors": 3, "hidden": 6, "layers": 1},
        "training": {"steps": 2, "log_every": 0},
        "corpus": {"count": 1, "duration_s": 0.4, "rir_len": 512, "max_image_order": 1, "pool_size": 2},
        "paths": {"work_dir": str(tmp_path / "work")},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return ["--config", str(path), *rest]


class TestCli:
    def test_full_run(self, tmp_path):
        runner = CliRunner()
        for command in ("gen-corpus", "design-beams", "train"):
            result = runner.invoke(cli, _args(tmp_path, command))
            assert result.exit_code == 0, result.output
        result = runner.invoke(cli, _args(tmp_path, "evaluate", "--systems", "irm,proposed"))
        assert result.exit_code == 0, result.output
        assert (tmp_path / "work" / "eval" / "summary.csv").exists()
        mixture = tmp_path / "work" / "corpus" / "mix_00000" / "mixture.wav"
        result = runner.invoke(cli, _args(tmp_path, "separate", str(mixture), "--out-dir", str(tmp_path / "s")))
        assert result.exit_code == 0, result.output
        assert (tmp_path / "s" / "mixture_spk1.wav").exists()

    def test_beampattern(self, tmp_path):
        runner = CliRunner()
        assert runner.invoke(cli, _args(tmp_path, "design-beams")).exit_code == 0
        out = tmp_path / "pattern.csv"
        result = runner.invoke(cli, _args(tmp_path, "beampattern", "--beam", "1", "--freq", "1000",
                                          "--step", "90", "--out", str(out)))
        assert result.exit_code == 0, result.output
        assert len(out.read_text().splitlines()) == 1 + 4

    def test_set_override(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(cli, _args(tmp_path, "--set", "corpus.count=2", "gen-corpus"))
        assert result.exit_code == 0, result.output
        lines = (tmp_path / "work" / "corpus" / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_usage_error_exit_code(self, tmp_path):
        assert CliRunner().invoke(cli, _args(tmp_path, "no-such-command")).exit_code == 1

    def test_bad_config_exit_code(self, tmp_path):
        result = CliRunner().invoke(cli, _args(tmp_path, "--set", "stft.frame_len=255", "gen-corpus"))
        assert result.exit_code == 1

    def test_empty_systems(self, tmp_path):
        assert CliRunner().invoke(cli, _args(tmp_path, "evaluate", "--systems", ",")).exit_code == 1

    def test_missing_artifact_is_data_error(self, tmp_path):
        result = CliRunner().invoke(cli, _args(tmp_path, "train"))
        assert result.exit_code == 2

    def test_reference_model_and_ranking(self, tmp_path):
        runner = CliRunner()
        for command in (["gen-corpus"], ["design-beams"], ["train", "--input", "reference"]):
            result = runner.invoke(cli, _args(tmp_path, *command))
            assert result.exit_code == 0, result.output
        assert (tmp_path / "work" / "dan_model.npz").exists()
        result = runner.invoke(cli, _args(tmp_path, "evaluate", "--systems", "dan,irm", "--rank-by", "input"))
        assert result.exit_code == 0, result.output

    def test_dan_without_reference_checkpoint(self, tmp_path):
        runner = CliRunner()
        for command in ("gen-corpus", "design-beams", "train"):
            assert runner.invoke(cli, _args(tmp_path, command)).exit_code == 0
        assert runner.invoke(cli, _args(tmp_path, "evaluate", "--systems", "dan")).exit_code == 2

    def test_unknown_training_input(self, tmp_path):
        assert CliRunner().invoke(cli, _args(tmp_path, "train", "--input", "stereo")).exit_code == 1

    def test_missing_held_out_corpus(self, tmp_path):
        result = CliRunner().invoke(cli, _args(tmp_path, "evaluate", "--corpus", str(tmp_path / "nowhere")))
        assert result.exit_code == 1

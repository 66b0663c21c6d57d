"""Test configuration resolution and precedence."""

import argparse
import io
import json
from unittest.mock import patch

import pytest
from pydantic import ValidationError

from app import SyntaxAttentionCLI, build_parser
from config import (
    FINETUNE_LEARNING_RATE,
    ModelConfig,
    RunConfig,
    Settings,
    TrainingConfig,
    get_settings,
    load_config_document,
    reset_settings,
)


class TestModelConfig:
    """Test derived defaults and index validation."""

    def test_derived_defaults(self):
        config = ModelConfig(num_layers=3, d_model=16, gat_heads=2, d_g=8)
        assert config.d_ff == 64
        assert config.syntax_layers == [0, 1, 2]
        assert config.syntax_heads == [0]
        assert config.gat_width == 16
        assert config.probe_rank == 16

    def test_indices_are_sorted_and_unique(self):
        config = ModelConfig(num_layers=3, num_heads=4, syntax_layers=[2, 0, 2], syntax_heads=[3, 1])
        assert config.syntax_layers == [0, 2]
        assert config.syntax_heads == [1, 3]
        assert config.is_syntax_head(2, 3)
        assert not config.is_syntax_head(1, 3)

    def test_empty_syntax_layers(self):
        config = ModelConfig(syntax_layers=[])
        assert not any(config.is_syntax_head(l, 0) for l in range(config.num_layers))

    @pytest.mark.parametrize("values", [
        {"num_layers": 2, "syntax_layers": [2]},
        {"num_heads": 2, "syntax_heads": [2]},
        {"alpha": -0.5},
        {"delta": 0},
        {"num_upos": 17},
        {"unknown_field": 1},
    ])
    def test_rejected(self, values):
        with pytest.raises(ValidationError):
            ModelConfig(**values)

    def test_json_round_trip(self):
        config = ModelConfig(d_model=8, syntax_heads=[0, 1], num_heads=2)
        assert ModelConfig(**config.model_dump(mode="json")) == config


class TestTrainingConfig:
    """Test training options."""

    def test_learning_rate_by_stage(self):
        assert TrainingConfig().resolved_learning_rate("finetune") == FINETUNE_LEARNING_RATE

    def test_warmup_range(self):
        with pytest.raises(ValidationError):
            TrainingConfig(warmup_fraction=1.5)

    def test_checkpoint_every_must_be_positive(self):
        with pytest.raises(ValidationError):
            TrainingConfig(checkpoint_every=0)


class TestRunConfig:
    """Test the resolved configuration record."""

    def test_write(self, tmp_path):
        run = RunConfig(subcommand="train", input="task.conllu", seed=4, options={"with_baseline": True})
        path = run.write(tmp_path / "out")
        document = json.loads(path.read_text())
        assert path.name == "resolved_config.json"
        assert document["seed"] == 4
        assert document["model"]["syntax_layers"] == [0, 1]
        assert document["options"] == {"with_baseline": True}

    def test_config_document(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"model": {"d_model": 8}}))
        assert load_config_document(path) == {"model": {"d_model": 8}}
        path.write_text("[1, 2]")
        with pytest.raises(ValueError):
            load_config_document(path)


class TestSettings:
    """Test environment-driven settings."""

    def test_defaults(self):
        settings = Settings()
        assert settings.log_level == "INFO"
        assert settings.grad_check_eps == 1e-5
        assert settings.num_workers == 0

    def test_environment_override(self, monkeypatch):
        monkeypatch.setenv("SYNATTN_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("SYNATTN_NUM_WORKERS", "2")
        reset_settings()
        settings = get_settings()
        assert settings.log_level == "DEBUG"
        assert settings.num_workers == 2
        assert get_settings() is settings


class TestPrecedence:
    """Test flags over config document over checkpoint values."""

    def cli(self, argv) -> SyntaxAttentionCLI:
        return SyntaxAttentionCLI(build_parser().parse_args(argv), io.StringIO())

    def test_flags_override_document(self, tmp_path):
        document = tmp_path / "c.json"
        document.write_text(json.dumps({"model": {"d_model": 12, "alpha": 0.25},
                                        "training": {"batch_size": 4, "epochs": 9}}))
        cli = self.cli(["train", "--input", "x.conllu", "--config", str(document), "--d-model", "16",
                        "--epochs", "2", "--seed", "7"])
        config = cli.model_config(None, base={"d_model": 32, "alpha": 1.0, "num_layers": 3})
        training = cli.training_config()

        assert config.d_model == 16
        assert config.alpha == 0.25
        assert config.num_layers == 3
        assert config.seed == 7
        assert training.batch_size == 4
        assert training.epochs == 2
        assert training.seed == 7

    def test_schedule_and_checkpoint_flags(self):
        training = self.cli(["pretrain-gat", "--input", "x.conllu", "--linear-decay",
                             "--checkpoint-every", "25"]).training_config()
        assert training.linear_decay
        assert training.checkpoint_every == 25
        defaults = self.cli(["pretrain-gat", "--input", "x.conllu"]).training_config()
        assert not defaults.linear_decay
        assert defaults.checkpoint_every == 100

    def test_vocabulary_sets_size(self, small_vocab):
        cli = self.cli(["preprocess", "--input", "x.conllu", "--output", "y.bin"])
        assert cli.model_config(small_vocab).vocab_size == len(small_vocab)

    def test_pairs_widen_delta(self, small_vocab):
        cli = self.cli(["preprocess", "--input", "x.conllu", "--output", "y.bin"])
        assert cli.model_config(small_vocab, multi_sentence=True).delta == 4
        cli = self.cli(["preprocess", "--input", "x.conllu", "--output", "y.bin", "--delta", "2"])
        assert cli.model_config(small_vocab, multi_sentence=True).delta == 2

    def test_default_output_dir(self, tmp_path):
        cli = SyntaxAttentionCLI(argparse.Namespace(command="train", output_dir=None, config=None), io.StringIO())
        with patch.object(cli, "settings", Settings(output_dir=str(tmp_path / "runs"))):
            assert cli.output_dir() == tmp_path / "runs" / "train"
        assert (tmp_path / "runs" / "train").is_dir()

    def test_settings_come_from_accessor(self):
        with patch("app.get_settings") as mock_settings:
            mock_settings.return_value.output_dir = "elsewhere"
            cli = self.cli(["make-task", "--size", "1", "--output", "x.conllu"])
        assert cli.settings.output_dir == "elsewhere"

"""
Tests for layered configuration: defaults, environment, TOML file and flags.
"""

from pathlib import Path

import pytest

from nidslabel.config import AppConfig, load_config
from nidslabel.core.errors import ConfigError
from nidslabel.ml.classifiers import ModelType, ThresholdPolicy
from tests.helpers import FIXTURES


def _toml(tmp_path, text):
    path = tmp_path / "nidslabel.toml"
    path.write_text(text, encoding="utf-8")
    return path


class TestDefaults:
    def test_values(self):
        config = load_config()
        assert config.split.min_count == 5
        assert config.split.train_frac == pytest.approx(0.8)
        assert config.split.seed == 7
        assert config.classifier.model_type is ModelType.SVM
        assert config.threshold_policy is ThresholdPolicy.POSITIVE_MARGIN
        assert config.prompt.icl_count == 0
        assert config.prompt.use_technique_guide is True
        assert config.provider.provider == "openai"
        assert config.strict is True
        assert config.output_dir == Path("out")
        assert config.llm_api_key is None

    def test_bundled_catalog(self):
        assert load_config().catalog_path.name == "enterprise-attack-snapshot.json"


class TestConfigFile:
    def test_overrides_defaults(self, tmp_path):
        path = _toml(
            tmp_path,
            'output_dir = "runs"\n\n[split]\nmin_count = 3\n\n[classifier]\nmodel_type = "gbm"\n',
        )
        config = load_config(path)
        assert config.output_dir == Path("runs")
        assert config.split.min_count == 3
        assert config.split.train_frac == pytest.approx(0.8)
        assert config.classifier.model_type is ModelType.GBM

    def test_fixture_file(self):
        config = load_config(FIXTURES / "nidslabel.toml")
        assert config.split.min_count == 5
        assert config.prompt.icl_count == 2
        assert config.provider.max_retries == 2

    def test_flags_override_file(self, tmp_path):
        path = _toml(tmp_path, "[split]\nmin_count = 3\n")
        config = load_config(path, {"split": {"min_count": 2}})
        assert config.split.min_count == 2

    def test_file_overrides_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NIDSLABEL_SPLIT__MIN_COUNT", "9")
        path = _toml(tmp_path, "[split]\nmin_count = 4\n")
        assert load_config(path).split.min_count == 4

    def test_invalid_value_names_field(self, tmp_path):
        path = _toml(tmp_path, "[split]\nmin_count = 0\n")
        with pytest.raises(ConfigError, match="split -> min_count"):
            load_config(path)

    def test_unknown_section_key(self, tmp_path):
        path = _toml(tmp_path, "[split]\nmin_cuont = 3\n")
        with pytest.raises(ConfigError, match="min_cuont"):
            load_config(path)

    def test_invalid_enum(self, tmp_path):
        path = _toml(tmp_path, '[classifier]\nmodel_type = "naive_bayes"\n')
        with pytest.raises(ConfigError, match="classifier -> model_type"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="config file not found"):
            load_config(tmp_path / "absent.toml")

    def test_malformed_toml(self, tmp_path):
        path = _toml(tmp_path, "[split\nmin_count = 3\n")
        with pytest.raises(ConfigError, match="malformed config file"):
            load_config(path)


class TestEnvironment:
    def test_nested_variable(self, monkeypatch):
        monkeypatch.setenv("NIDSLABEL_SPLIT__MIN_COUNT", "3")
        assert load_config().split.min_count == 3

    def test_top_level_variable(self, monkeypatch):
        monkeypatch.setenv("NIDSLABEL_JOBS", "4")
        assert load_config().jobs == 4

    def test_api_key(self, monkeypatch):
        monkeypatch.setenv("LLM_API_KEY", "sk-env-key")
        config = load_config()
        assert config.llm_api_key.get_secret_value() == "sk-env-key"
        assert "sk-env-key" not in repr(config)

    def test_invalid_environment_value(self, monkeypatch):
        monkeypatch.setenv("NIDSLABEL_JOBS", "0")
        with pytest.raises(ConfigError, match="jobs"):
            load_config()

    def test_settings_class_reads_environment(self, monkeypatch):
        monkeypatch.setenv("NIDSLABEL_STRICT", "false")
        assert AppConfig().strict is False

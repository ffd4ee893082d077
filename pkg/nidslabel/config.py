"""
Application configuration using Pydantic Settings.

Sources, lowest to highest priority:
    field defaults < .env file < NIDSLABEL_* environment < --config TOML file < CLI flags

Nested sections use "__" in environment variables, e.g.
NIDSLABEL_SPLIT__MIN_COUNT=3. The provider API key is read from LLM_API_KEY.
"""

import os
import tomllib
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, SecretStr, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from nidslabel.attack.catalog import DEFAULT_CATALOG_PATH
from nidslabel.core.errors import ConfigError, format_validation_error
from nidslabel.llm.prompting import PromptConfig
from nidslabel.ml.classifiers import Hyperparams, ThresholdPolicy
from nidslabel.ml.features import TokenizerConfig
from nidslabel.services.chat import ProviderSettings


def get_env_file() -> str:
    """Determine which env file to use based on environment."""
    if os.getenv("APP_ENV", "development") == "production":
        return ".env.production"
    return ".env"


class SplitSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_frac: float = Field(default=0.8, gt=0, lt=1)
    min_count: int = Field(default=5, ge=1)
    seed: int = Field(default=7, ge=0)


class AppConfig(BaseSettings):
    """Toolchain settings; one instance per CLI run."""

    model_config = SettingsConfigDict(
        env_prefix="NIDSLABEL_",
        env_nested_delimiter="__",
        env_file=get_env_file(),
        env_file_encoding="utf-8",
        extra="ignore",
    )

    catalog_path: Path = DEFAULT_CATALOG_PATH
    output_dir: Path = Path("out")
    jobs: int = Field(default=1, ge=1)
    strict: bool = True
    log_level: str = "INFO"

    split: SplitSettings = SplitSettings()
    features: TokenizerConfig = TokenizerConfig()
    classifier: Hyperparams = Hyperparams()
    threshold_policy: ThresholdPolicy = ThresholdPolicy.POSITIVE_MARGIN
    tuning_rounds: int = Field(default=3, ge=1)
    prompt: PromptConfig = PromptConfig()
    provider: ProviderSettings = ProviderSettings()

    llm_api_key: SecretStr | None = Field(default=None, validation_alias="LLM_API_KEY")


def _deep_merge(base: dict[str, Any], updates: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> AppConfig:
    """
    Build the run configuration.

    Args:
        path: Optional TOML config file
        overrides: Nested values from command-line flags (highest priority)

    Returns:
        Validated AppConfig

    Raises:
        ConfigError: Missing or malformed file, or invalid values (the message
            names the offending field path)
    """
    try:
        data = AppConfig().model_dump(exclude={"llm_api_key"})
        if path is not None:
            toml_path = Path(path)
            if not toml_path.is_file():
                raise ConfigError(f"config file not found: {toml_path}")
            data = _deep_merge(data, TomlConfigSettingsSource(AppConfig, toml_file=toml_path)())
        data = _deep_merge(data, overrides or {})
        # llm_api_key is left out so it is read from the environment again
        return AppConfig(**data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {format_validation_error(exc)}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc

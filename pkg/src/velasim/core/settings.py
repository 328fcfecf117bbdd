from __future__ import annotations

import logging
from pathlib import Path

from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    PyprojectTomlConfigSettingsSource,
    SettingsConfigDict,
)

logger = logging.getLogger(__name__)

DEFAULT_TOOL_NAME = "velasim"


class VelasimBaseSettings(BaseSettings):
    """
    Base settings that loads from:
    1. pyproject.toml [tool.velasim] (lowest priority)
    2. .env file
    3. Environment variables (highest priority)
    """

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            PyprojectTomlConfigSettingsSource(settings_cls),
            file_secret_settings,
        )


class Settings(VelasimBaseSettings):

    model_config = SettingsConfigDict(
        env_prefix="VELASIM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        pyproject_toml_depth=2,
        pyproject_toml_table_header=("tool", DEFAULT_TOOL_NAME),
    )

    # runs
    output_root: Path = Path("runs")
    workers: int = 1
    default_seed: int = 0
    event_log: bool = True

    # logging
    log_level: str = "INFO"
    log_json: bool = False

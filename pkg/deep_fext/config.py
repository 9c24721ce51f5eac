"""Toolkit settings, loaded from the environment and an optional env file."""
import os

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime settings shared by every command."""

    THREADS: int = 1
    LOG_LEVEL: str = "INFO"

    IMAGE_FORMATS: list[str] = ["PPM", "PNG"]
    PREDICT_TILE: int = 96
    CENTERLINE_SUFFIX: str = ".centerline"

    model_config = SettingsConfigDict(env_prefix="DEEP_FEXT_", env_file=".env", extra="ignore")


# Load different env files based on the environment
ENVIRONMENT = os.getenv("DEEP_FEXT_ENV", "development")

if ENVIRONMENT == "production":
    settings = Settings(_env_file=".env.cloud")
else:
    settings = Settings(_env_file=".env.local")

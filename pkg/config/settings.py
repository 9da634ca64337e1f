"""
Configuration settings for RaterLab.
"""
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="RATERLAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application Configuration
    app_name: str = "RaterLab"
    app_version: str = "1.0.0"
    environment: str = "development"

    # Logging Configuration
    log_level: str = "INFO"
    log_format: str = (
        "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
        "{extra[name]} - <level>{message}</level>"
    )
    log_file: Optional[str] = None

    # Execution
    threads: Optional[int] = None  # RATERLAB_THREADS wins over --threads

    # Fusion Configuration
    fusion_threshold: float = 0.5
    staple_init: float = 0.99
    staple_tol: float = 1e-7
    staple_max_iters: int = 100
    probability_floor: float = 1e-12

    # Uncertainty Configuration
    mc_samples: int = 10
    tta_rotation_deg: float = 10.0
    tta_translation_px: float = 3.0
    tta_scale_delta: float = 0.02
    entropy_threshold: float = 0.5

    # Metrics Configuration
    assd_bruteforce_max_pairs: int = 250_000
    dice_empty_value: float = 1.0

    # Simulation Configuration
    phantom_max_retries: int = 50


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get application settings."""
    return settings


def is_development() -> bool:
    """Check if running in development mode."""
    return settings.environment.lower() == "development"


def resolve_threads(cli_threads: Optional[int] = None) -> int:
    """
    Resolve the worker count.

    RATERLAB_THREADS overrides the command-line value; the fallback is a
    single worker.
    """
    if settings.threads is not None:
        return max(1, settings.threads)
    if cli_threads is not None:
        return max(1, cli_threads)
    return 1

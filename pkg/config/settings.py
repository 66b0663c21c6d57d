"""Runtime settings module."""

from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings with environment variable support (``SYNATTN_*``)."""

    model_config = SettingsConfigDict(
        env_prefix="SYNATTN_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging
    log_level: str = "INFO"
    enable_debug: bool = False

    # Output
    output_dir: str = "runs"

    # Batch assembly (0 = assemble inline)
    num_workers: int = 0
    prefetch_batches: int = 2

    # Gradient check
    grad_check_tolerance: float = 1e-4
    grad_check_eps: float = 1e-5
    grad_check_coords: Optional[int] = 6


# Singleton instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get process settings."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings() -> None:
    """Drop the cached settings so the environment is read again."""
    global _settings
    _settings = None

"""
Application Configuration Module

This module handles all run settings using Pydantic's BaseSettings.
Environment variables (prefixed with POLLING_) are automatically loaded
from a .env file, so a batch of experiments can be re-targeted without
touching plan files.
"""

import logging

from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Run settings loaded from environment variables.

    Pydantic reads these values from:
    1. Environment variables such as POLLING_MASTER_SEED (highest priority)
    2. .env file (if exists)
    3. Default values below

    Plan files and CLI flags override the experiment-level values
    (seed, output directory, threads, budget).
    """

    # Master seed every derived random stream is built from
    MASTER_SEED: int = 20080601

    # Directory where CSV / JSON outputs are written
    OUTPUT_DIR: str = "results"

    # Worker threads for replicas and sweep points
    THREADS: int = 1

    # Budget for s0 bisection, counted in matrix products
    BUDGET_OPS: int = 2_000_000_000

    # "development" turns on DEBUG logging
    ENVIRONMENT: str = "production"

    LOG_LEVEL: str = "INFO"

    # Support enumeration cap for the transient-support scan
    SUPPORT_SCAN_CAP: int = 1_000_000

    # Power iteration
    POWER_ITER_CAP: int = 10_000
    POWER_ITER_TOL: float = 1e-12

    # Fluid model truncation and divergence detection
    FLUID_REL_TOL: float = 1e-9
    FLUID_MAX_EPOCHS: int = 100_000
    FLUID_DIVERGENCE_FACTOR: float = 1e6

    # Lyapunov grid: s in {0, step, 2*step, ..., s_max}
    LYAPUNOV_S_MAX: float = 8.0
    LYAPUNOV_GRID_STEP: float = 0.25

    # Two-sided confidence used by the classifier
    CONFIDENCE: float = 0.99

    # Regime law weights must sum to 1 within this tolerance
    WEIGHT_TOLERANCE: float = 1e-12

    @field_validator("LOG_LEVEL")
    def validate_log_level(cls, value):
        value = value.upper()
        # getLevelNamesMapping is 3.11+; _nameToLevel is what it copies
        level_names = getattr(logging, "getLevelNamesMapping", lambda: dict(logging._nameToLevel))()
        if value not in level_names:
            raise ValueError(f"Unknown log level: {value}")
        return value

    @property
    def effective_log_level(self) -> str:
        if self.ENVIRONMENT == "development":
            return "DEBUG"
        return self.LOG_LEVEL

    class Config:
        """
        Pydantic configuration class.

        Loads settings from a .env file in the working directory and
        namespaces every variable with POLLING_.
        """
        env_file = ".env"
        env_prefix = "POLLING_"


# Global settings instance used throughout the package
settings = Settings()

"""Configuration management for the cascade search toolkit.

Provides centralized configuration loading from environment variables with sensible defaults.
Supports .env file loading for local development.

Configuration includes:
- Search defaults (budget, cascade size, population and cluster counts)
- Worker pool size and evaluation cache size
- Hypervolume reference point
- Logging level
"""

import os
from typing import Optional

TOOL_VERSION = '0.3.0'


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ValueError(f"Environment variable {name} must be an integer, got {raw!r}") from e


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return float(raw)
    except ValueError as e:
        raise ValueError(f"Environment variable {name} must be a number, got {raw!r}") from e


class Config:
    """Configuration management for the cascade search toolkit."""

    @staticmethod
    def load_env():
        """Load environment variables from .env file if it exists."""
        try:
            from dotenv import load_dotenv
            load_dotenv()
        except ImportError:
            # python-dotenv not installed, plain environment variables still work
            pass

    # -----------------------------------------------------------------------------
    # Search defaults
    # -----------------------------------------------------------------------------
    @property
    def BUDGET(self) -> int:
        """Number of fitness evaluations per search run."""
        return _env_int('ENCAS_BUDGET', 600000)

    @property
    def MAX_CASCADE_SIZE(self) -> int:
        """Maximum number of stages k in a cascade genome."""
        return _env_int('ENCAS_MAX_CASCADE_SIZE', 5)

    @property
    def POPULATION_SIZE(self) -> int:
        """MO-GOMEA population size."""
        return _env_int('ENCAS_POPULATION_SIZE', 100)

    @property
    def CLUSTER_COUNT(self) -> int:
        """Number of objective-space clusters per MO-GOMEA generation."""
        return _env_int('ENCAS_CLUSTER_COUNT', 5)

    @property
    def EXHAUSTIVE_LIMIT(self) -> int:
        """Largest genome space the exhaustive backend will enumerate."""
        return _env_int('ENCAS_EXHAUSTIVE_LIMIT', 10_000_000)

    @property
    def CONFIDENCE_MODE(self) -> str:
        """Confidence function: 'max-prob' or 'top-gap'."""
        return os.getenv('ENCAS_CONFIDENCE_MODE', 'max-prob').lower()

    # -----------------------------------------------------------------------------
    # Execution
    # -----------------------------------------------------------------------------
    @property
    def WORKERS(self) -> int:
        """Default size of the evaluation worker pool."""
        return max(1, _env_int('ENCAS_WORKERS', 1))

    @property
    def PREFIX_CACHE_MB(self) -> float:
        """Memory cap for memoized cascade prefixes, in megabytes (0 disables the cache)."""
        return _env_float('ENCAS_PREFIX_CACHE_MB', 256.0)

    # -----------------------------------------------------------------------------
    # Hypervolume reference point
    # -----------------------------------------------------------------------------
    @property
    def HV_REF_MFLOPS(self) -> float:
        return _env_float('ENCAS_HV_REF_MFLOPS', 4000.0)

    @property
    def HV_REF_ACCURACY(self) -> float:
        return _env_float('ENCAS_HV_REF_ACCURACY', 60.0)

    # -----------------------------------------------------------------------------
    # Logging
    # -----------------------------------------------------------------------------
    @property
    def LOG_LEVEL(self) -> str:
        return os.getenv('ENCAS_LOG_LEVEL', 'INFO').upper()

    @property
    def RUN_SLOW(self) -> Optional[str]:
        """Set to enable the long-running acceptance tests."""
        return os.getenv('ENCAS_RUN_SLOW')

"""
STAND Configuration Settings
Uses Pydantic Settings for type-safe configuration with environment variables
"""

from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import field_validator
from typing import Optional
from functools import lru_cache


DRAFT_MODES = ("stochastic", "multinomial", "deterministic")
STORE_SCOPES = ("per_trajectory", "per_problem", "global")


class Settings(BaseSettings):
    """Application settings"""

    # ========================================================================
    # APPLICATION
    # ========================================================================
    PROJECT_NAME: str = "STAND"
    VERSION: str = "1.0.0"

    # Log Level
    LOG_LEVEL: str = "INFO"  # DEBUG, INFO, WARNING, ERROR, CRITICAL

    # ========================================================================
    # TARGET MODEL
    # ========================================================================
    TEMPERATURE: float = 0.6
    MODEL_SPEC_PATH: Optional[str] = None  # served by the logit server

    # ========================================================================
    # REMOTE TARGET (logit server client)
    # ========================================================================
    REMOTE_ENDPOINT: Optional[str] = None
    REMOTE_TIMEOUT_SECONDS: float = 10.0
    REMOTE_MAX_RETRIES: int = 3
    REMOTE_BACKOFF_SECONDS: float = 0.2
    REMOTE_SUM_TOLERANCE: float = 1e-4

    # ========================================================================
    # NGRAM STORE
    # ========================================================================
    STORE_TOP_K: int = 10
    STORE_MAX_NGRAM: int = 4
    STORE_MAX_ENTRIES_PER_TABLE: Optional[int] = None  # None = no eviction

    # ========================================================================
    # GUMBEL NOISE CACHE
    # ========================================================================
    GUMBEL_REFILL_SIZE: int = 65_536
    GUMBEL_EPSILON: float = 1e-12

    # ========================================================================
    # DRAFT TREE
    # ========================================================================
    TREE_TARGET_NODES: int = 80
    TREE_MEASUREMENT_PROBLEMS: int = 30

    # ========================================================================
    # ENGINE
    # ========================================================================
    DRAFT_MODE: str = "stochastic"  # stochastic, multinomial, deterministic
    STORE_SCOPE: str = "per_problem"  # per_trajectory, per_problem, global
    PREFILL_SEEDING: bool = True
    MAX_TOKENS: int = 256
    TRAJECTORIES: int = 4
    SEED: int = 0

    # ========================================================================
    # LOGIT SERVER
    # ========================================================================
    SERVER_HOST: str = "127.0.0.1"
    SERVER_PORT: int = 8000

    @field_validator("TEMPERATURE")
    @classmethod
    def check_temperature(cls, v):
        if v <= 0:
            raise ValueError("TEMPERATURE must be positive")
        return v

    @field_validator("DRAFT_MODE")
    @classmethod
    def check_draft_mode(cls, v):
        if v not in DRAFT_MODES:
            raise ValueError(f"DRAFT_MODE must be one of {DRAFT_MODES}")
        return v

    @field_validator("STORE_SCOPE")
    @classmethod
    def check_store_scope(cls, v):
        if v not in STORE_SCOPES:
            raise ValueError(f"STORE_SCOPE must be one of {STORE_SCOPES}")
        return v

    # ========================================================================
    # PYDANTIC CONFIG
    # ========================================================================
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="allow",
    )

    # ========================================================================
    # COMPUTED PROPERTIES
    # ========================================================================

    @property
    def has_remote_target(self) -> bool:
        return bool(self.REMOTE_ENDPOINT)


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


# Global settings instance
settings = get_settings()

"""
Configuration settings for the API.
"""

import os
from typing import Optional


class Settings:
    """Application settings."""

    # API Configuration
    API_TITLE: str = "liftmesh API"
    API_DESCRIPTION: str = "2D skeleton to 3D joints and body mesh inference"
    API_VERSION: str = "0.1.0"

    # Model files; when unset the desk body model and a seeded initialization are used
    CHECKPOINT_PATH: Optional[str] = os.getenv("LIFTMESH_CHECKPOINT")
    BODY_PATH: Optional[str] = os.getenv("LIFTMESH_BODY")
    CONFIG_PATH: Optional[str] = os.getenv("LIFTMESH_CONFIG")

    # Seed for the fallback initialization
    INIT_SEED: int = int(os.getenv("LIFTMESH_SEED", "0"))

    LOG_LEVEL: str = os.getenv("LIFTMESH_LOG_LEVEL", "INFO")

    @classmethod
    def reload(cls) -> None:
        """Re-read environment-backed settings."""
        cls.CHECKPOINT_PATH = os.getenv("LIFTMESH_CHECKPOINT")
        cls.BODY_PATH = os.getenv("LIFTMESH_BODY")
        cls.CONFIG_PATH = os.getenv("LIFTMESH_CONFIG")
        cls.INIT_SEED = int(os.getenv("LIFTMESH_SEED", "0"))
        cls.LOG_LEVEL = os.getenv("LIFTMESH_LOG_LEVEL", "INFO")


# Global settings instance
settings = Settings()

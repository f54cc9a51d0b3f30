from pathlib import Path
from typing import Literal, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    PROJECT_NAME: str = "ldl-idr"
    VERSION: str = "0.1.0"
    BRIEF_DESCRIPTION: str = "Label distribution learning through implicit distribution representation."

    # --- Runtime environment ---
    ENV: str = Field("development", description="Runtime environment (development renders console logs, anything else JSON)")
    LOG_LEVEL: str = Field("INFO", description="Root log level")

    # --- Run defaults ---
    OUTPUT_DIR: Path = Field(Path("runs"), description="Default output directory for every CLI subcommand")
    DEFAULT_SEED: int = Field(0, description="Seed used when a run does not pass --seed")
    DEFAULT_JOBS: int = Field(1, ge=1, description="Worker threads for cross-validation splits")
    FLOAT_DTYPE: Literal["float64", "float32"] = Field("float64", description="Tensor precision; float64 keeps gradient checks meaningful")

    # --- File formats ---
    SCHEMA_VERSION: int = Field(1, description="Version stamped into checkpoints and reports")

    # --- Inference service ---
    MODEL_PATH: Optional[Path] = Field(None, description="Checkpoint served by the HTTP service")

    # Numerical constants shared across modules
    LOG_EPS: float = 1e-12
    SIMPLEX_TOL: float = 1e-6

    model_config = SettingsConfigDict(
        env_file=".env",
        extra="ignore"
    )


settings = Settings()

import os
from typing import Optional
from pydantic_settings import BaseSettings

TOOL_VERSION = "0.3.0"


class Settings(BaseSettings):
    # Logging
    log_level: str = os.getenv("LOG_LEVEL", "INFO")

    # Reproducibility
    # PRISE_DETERMINISTIC=1 is equivalent to passing --deterministic
    deterministic: bool = os.getenv("PRISE_DETERMINISTIC", "0").lower() in ("1", "true", "yes", "y")
    seed: int = int(os.getenv("PRISE_SEED", "7"))

    # Numerics: float64 is the default everywhere, float32 is opt-in
    precision: str = os.getenv("PRISE_PRECISION", "float64")

    # Upper bound on internal parallelism (ablation variants, evaluation)
    workers: int = int(os.getenv("PRISE_WORKERS", "1"))

    # Where subcommands write artifacts when --out is not given
    artifact_dir: str = os.getenv("PRISE_ARTIFACT_DIR", "runs")

    # Optional JSON file with experiment defaults (overridden by flags)
    config_file: Optional[str] = os.getenv("PRISE_CONFIG_FILE")

    class Config:
        env_file = ".env"
        extra = "ignore"

    def effective_workers(self) -> int:
        """Deterministic mode forces serial execution."""
        if self.deterministic:
            return 1
        return max(1, self.workers)


settings = Settings()

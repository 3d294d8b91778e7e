import os
import logging
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel

# Load environment variables from .env file
load_dotenv()

_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR"}


class Settings(BaseModel):
    log_level: str = "WARNING"
    workers: int = 1
    cases_dir: Path = Path(__file__).resolve().parent.parent / "dataset" / "cases"

    @property
    def logging_level(self) -> int:
        return getattr(logging, self.log_level)


def get_settings() -> Settings:
    """Settings from the environment (DROHS_LOG, DROHS_WORKERS, DROHS_CASES)."""
    level = os.getenv("DROHS_LOG", "WARNING").upper()
    if level not in _LEVELS:
        level = "WARNING"
    settings = Settings(log_level=level)
    workers = os.getenv("DROHS_WORKERS")
    if workers and workers.isdigit() and int(workers) > 0:
        settings.workers = int(workers)
    cases = os.getenv("DROHS_CASES")
    if cases:
        settings.cases_dir = Path(cases)
    return settings

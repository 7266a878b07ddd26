import logging
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

DEFAULT_OUTPUT_ROOT = "./runs"
DEFAULT_LOG_LEVEL = "INFO"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def output_root() -> Path:
    """Root directory every stage writes under."""
    return Path(os.getenv("SINOGUIDE_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT))


def registry_url() -> str:
    url = os.getenv("SINOGUIDE_REGISTRY_URL")
    if url:
        return url
    return f"sqlite:///{output_root() / 'registry.db'}"


def device_name() -> str:
    name = os.getenv("SINOGUIDE_DEVICE")
    if name:
        return name
    import torch

    return "cuda" if torch.cuda.is_available() else "cpu"


def log_level() -> str:
    return os.getenv("SINOGUIDE_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


def progress_enabled() -> bool:
    return logging.getLevelName(log_level()) in (logging.DEBUG, logging.INFO)


def configure_logging() -> None:
    root = logging.getLogger()
    if root.handlers:
        root.setLevel(log_level())
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(log_level())

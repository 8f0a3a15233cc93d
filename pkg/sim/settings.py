import logging
import os

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "[%(name)s] %(levelname)s %(message)s"


def log_level() -> str:
    """Verbosity requested through MCCSIM_LOG (defaults to WARNING)."""
    return os.getenv("MCCSIM_LOG", "WARNING").upper()


def default_seed() -> int:
    raw = os.getenv("MCCSIM_SEED", "0")
    try:
        return int(raw, 0)
    except ValueError:
        logging.getLogger(__name__).warning("ignoring non-numeric MCCSIM_SEED=%r", raw)
        return 0


def progress_enabled() -> bool:
    return os.getenv("MCCSIM_PROGRESS", "0").strip().lower() in {"1", "true", "yes", "on"}


def configure_logging(level: str | None = None) -> None:
    """Set up root logging once for command-line use."""
    level = (level or log_level()).upper()
    numeric = logging.getLevelName(level)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)

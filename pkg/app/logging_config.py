"""Logging setup shared by the server and the command line."""
import logging
from typing import Optional

from pythonjsonlogger import jsonlogger

from app.config import Settings, settings as default_settings

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(settings: Optional[Settings] = None, level: Optional[str] = None) -> None:
    """Plain text lines, or JSON lines when ``settings.log_json`` is set."""
    settings = settings or default_settings
    level = (level or settings.log_level).upper()
    if settings.log_json:
        handler = logging.StreamHandler()
        handler.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT))
        logging.basicConfig(level=level, handlers=[handler], force=True)
    else:
        logging.basicConfig(level=level, format=LOG_FORMAT, force=True)

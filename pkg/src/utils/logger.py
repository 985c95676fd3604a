import logging

from src.utils.config import Config

_FORMAT = "[%(levelname)s] %(name)s: %(message)s"
_configured = False


def get_logger(name: str) -> logging.Logger:
    """Return a module logger using the project's tagged format."""
    global _configured
    if not _configured:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        root = logging.getLogger("beamsep")
        root.addHandler(handler)
        root.setLevel(Config.LOG_LEVEL.upper())
        _configured = True
    short = name.split(".")[-1]
    return logging.getLogger(f"beamsep.{short}")

"""
Logging setup for facessd.

Every component logs through a named logger under ``facessd.``; records are
prefixed with a coloured component tag such as ``[TRAINER]``.
"""
import logging
import os
from typing import Optional

from .errors import ConfigError

LOG_LEVEL_ENV = "FSSD_LOG_LEVEL"

LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

LOG_FORMAT = '%(asctime)s - [%(name)s] - %(message)s'


# ANSI color codes for component tags
class Colors:
    CYAN = '\033[96m'
    BLUE = '\033[94m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    MAGENTA = '\033[95m'
    RED = '\033[91m'
    RESET = '\033[0m'
    BOLD = '\033[1m'


COMPONENT_COLORS = {
    "trainer": Colors.CYAN,
    "loader": Colors.BLUE,
    "data": Colors.GREEN,
    "service": Colors.MAGENTA,
    "cli": Colors.YELLOW,
}


class ColoredFormatter(logging.Formatter):
    """Formatter that tags facessd records with a coloured component prefix."""

    def __init__(self, fmt: str = LOG_FORMAT, use_color: bool = True):
        super().__init__(fmt)
        self.use_color = use_color

    def format(self, record):
        original = super().format(record)
        parts = record.name.split(".")
        if parts[0] != "facessd" or len(parts) < 2:
            return original

        component = parts[1]
        tag = f"[{component.upper()}]"
        if not self.use_color:
            return f"{tag} {original}"

        color = COMPONENT_COLORS.get(component, Colors.CYAN)
        if record.levelno >= logging.ERROR:
            color = Colors.RED
        return f"{Colors.BOLD}{color}{tag}{Colors.RESET} {original}"


def resolve_level(level: Optional[str] = None) -> int:
    """
    Resolve a level name, falling back to $FSSD_LOG_LEVEL and then to info.

    Raises:
        ConfigError: if the name is not one of error, info, debug
    """
    name = level or os.environ.get(LOG_LEVEL_ENV) or "info"
    try:
        return LEVELS[name.strip().lower()]
    except KeyError:
        raise ConfigError(
            f"unknown log level {name!r} (expected one of {', '.join(LEVELS)})"
        ) from None


def configure_logging(level: Optional[str] = None, use_color: Optional[bool] = None) -> logging.Logger:
    """Install the coloured handler on the ``facessd`` logger and return it."""
    if use_color is None:
        use_color = os.environ.get("NO_COLOR") is None

    root = logging.getLogger("facessd")
    root.setLevel(resolve_level(level))

    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(ColoredFormatter(LOG_FORMAT, use_color=use_color))
        root.addHandler(handler)
        root.propagate = False  # Don't propagate to root logger
    else:
        for handler in root.handlers:
            handler.setFormatter(ColoredFormatter(LOG_FORMAT, use_color=use_color))

    # Suppress noisy third-party logs
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)
    logging.getLogger("httpx").setLevel(logging.WARNING)
    logging.getLogger("httpcore").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)

    return root

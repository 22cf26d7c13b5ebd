"""
Logging bootstrap and module entry point for pollinate.
"""

import logging
import sys
from pathlib import Path

from .config import get_settings


def setup_logging(level: str | None = None, log_dir: str | None = None):
    """Configure logging for the application.

    Log records go to stderr so command output on stdout stays machine
    readable; a file handler is added when log_dir exists.
    """
    settings = get_settings()
    level = (level or settings.log_level).upper()
    log_dir = Path(log_dir or settings.log_dir)
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stderr),
            (
                logging.FileHandler(log_dir / "pollinate.log")
                if log_dir.exists()
                else logging.NullHandler()
            ),
        ],
        force=True,
    )


if __name__ == "__main__":
    from .cli import main

    sys.exit(main())

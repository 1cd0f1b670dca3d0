"""
Shared logging for hybridroi.

One process-wide logger writes to stdout and to a rotating file under
HYBRIDROI_LOG_DIR. Training commands additionally mirror records into
`<out>/run.log` so every experiment directory carries its own trace.
"""
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

LOG_DIR = Path(os.getenv("HYBRIDROI_LOG_DIR", "logs"))
LOG_FILE = LOG_DIR / "hybridroi.log"
RUN_LOG_NAME = "run.log"

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()


def _formatter() -> logging.Formatter:
    return logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)


def setup_logger(name: str = "hybridroi") -> logging.Logger:
    """
    Configure the shared logger once: console plus rotating file
    (5 MB per file, three backups)
    """
    log = logging.getLogger(name)
    if log.handlers:
        return log

    log.setLevel(LOG_LEVEL)

    console = logging.StreamHandler(sys.stdout)
    console.setLevel(LOG_LEVEL)
    console.setFormatter(_formatter())
    log.addHandler(console)

    try:
        LOG_DIR.mkdir(parents=True, exist_ok=True)
        rotating = RotatingFileHandler(LOG_FILE, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8")
    except OSError as exc:
        log.warning(f"File logging disabled, cannot open {LOG_FILE}: {exc}")
    else:
        rotating.setLevel(LOG_LEVEL)
        rotating.setFormatter(_formatter())
        log.addHandler(rotating)

    return log


def set_level(level: str) -> None:
    """Change the level of the shared logger and all of its handlers"""
    level = level.upper()
    logger.setLevel(level)
    for handler in logger.handlers:
        handler.setLevel(level)


def attach_run_log(out_dir) -> logging.Handler:
    """Mirror log records into `<out_dir>/run.log` until `detach_run_log` is called"""
    path = Path(out_dir) / RUN_LOG_NAME
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setLevel(logger.level)
    handler.setFormatter(_formatter())
    logger.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logger.removeHandler(handler)
    handler.close()


logger = setup_logger()

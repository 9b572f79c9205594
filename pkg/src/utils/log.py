import logging
import sys
from pathlib import Path
from typing import Optional

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# PIL logs every PNG chunk at DEBUG
QUIET_LOGGERS = ("PIL", "imageio")


def _formatter() -> logging.Formatter:
    return logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)


def setup_logging(level: str = "INFO", log_file: Optional[str | Path] = None) -> None:
    """
    Stdout handler on the root logger, plus an optional run log file.

    Safe to call again: the level is updated, the stdout handler is not duplicated and
    a file handler is only added once per path.
    """
    root = logging.getLogger()
    level = level.upper()
    root.setLevel(level)

    if not any(getattr(h, "_voxfield_stdout", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(_formatter())
        handler._voxfield_stdout = True  # type: ignore[attr-defined]
        root.addHandler(handler)

    if log_file is not None:
        path = Path(log_file).resolve()
        known = {Path(h.baseFilename).resolve() for h in root.handlers if isinstance(h, logging.FileHandler)}
        if path not in known:
            path.parent.mkdir(parents=True, exist_ok=True)
            fh = logging.FileHandler(path, encoding="utf-8")
            fh.setFormatter(_formatter())
            root.addHandler(fh)

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(logging.WARNING, root.level))

import logging
import os
from logging.handlers import RotatingFileHandler


def setup_logging(level: str = "INFO", logfile: str | None = "./logs/pano_epipolar.log",
                  max_bytes: int = 1048576, backup_count: int = 5):
    log_level = getattr(logging, str(level).upper(), logging.INFO)
    logger = logging.getLogger("pano_epipolar")
    logger.setLevel(log_level)
    logger.handlers = []

    # Console
    ch = logging.StreamHandler()
    ch.setLevel(log_level)
    ch.setFormatter(logging.Formatter("[%(asctime)s] %(levelname)s - %(message)s"))
    logger.addHandler(ch)

    # Rotating file, optional
    if logfile:
        os.makedirs(os.path.dirname(os.path.abspath(logfile)), exist_ok=True)
        fh = RotatingFileHandler(logfile, maxBytes=max_bytes, backupCount=backup_count)
        fh.setLevel(log_level)
        fh.setFormatter(logging.Formatter(
            "%(asctime)s | %(levelname)s | %(name)s | %(filename)s:%(lineno)d | %(message)s"
        ))
        logger.addHandler(fh)

    logger.debug("Logger initialized")
    return logger

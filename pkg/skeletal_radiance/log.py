"""
Logging setup for the command line and launcher scripts
"""

import logging

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(verbosity: int = 0) -> None:
    """Configure the root logger once; verbosity -1 quiet, 0 info, 1+ debug"""
    if verbosity < 0:
        level = logging.WARNING
    elif verbosity == 0:
        level = logging.INFO
    else:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)


def progress_disabled(logger: logging.Logger) -> bool:
    """tqdm bars are shown only when the logger would print INFO messages"""
    return not logger.isEnabledFor(logging.INFO)

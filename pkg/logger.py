"""
Logger module for the mask-text engine.
Configures and provides logging functionality.
"""

import logging
import os
import sys
from typing import Optional

from caption_merge import MergeReport
from projection_fusion import FusionReport


def setup_logger(log_level: str = "INFO",
                 log_file: Optional[str] = None) -> logging.Logger:
    """
    Set up and configure the root logger.

    Console output goes to stderr so that stdout and the output files stay
    free of log lines.

    Args:
        log_level (str): Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file (Optional[str]): Path to log file (None for console logging only)

    Returns:
        logging.Logger: Configured logger
    """
    log_levels = {
        "DEBUG": logging.DEBUG,
        "INFO": logging.INFO,
        "WARNING": logging.WARNING,
        "ERROR": logging.ERROR,
        "CRITICAL": logging.CRITICAL
    }

    numeric_level = log_levels.get(str(log_level).upper(), logging.INFO)

    logger = logging.getLogger()
    logger.setLevel(numeric_level)

    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(name)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)

        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

        logger.debug("Logging to file: %s", log_file)

    return logger


def log_fuse_report(logger: logging.Logger, scene_id: str, report: FusionReport) -> None:
    """
    Log the counters of one fusion run in a standardized format.

    Args:
        logger (logging.Logger): Logger instance
        scene_id (str): Scene identifier
        report (FusionReport): Fusion counters
    """
    logger.info(f"FUSE: {scene_id} frames={report.frames_processed} masks={report.masks_in} "
                f"pairs={report.pairs_out} empty={report.empty_regions_skipped}")


def log_merge_report(logger: logging.Logger, report: MergeReport) -> None:
    """
    Log the counters of one merge run in a standardized format.

    Args:
        logger (logging.Logger): Logger instance
        report (MergeReport): Merge counters
    """
    logger.info(f"MERGE: pairs={report.pairs_in} assigned={report.pairs_assigned} "
                f"unassigned={report.pairs_unassigned} proposals={report.proposals_in} "
                f"merged={report.proposals_out}")

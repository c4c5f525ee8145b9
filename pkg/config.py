"""
Configuration module for the mask-text engine.
Loads and provides access to configuration parameters.
"""

import os
import json
import logging
from typing import Dict, Any, Optional

from errors import FormatError

# Default configuration
DEFAULT_CONFIG = {
    "epsilon": 0.05,  # Depth tolerance in meters
    "frame_stride": None,  # None -> dataset preset, else 1
    "dataset": None,  # Key of DATASET_FRAME_STRIDES
    "iou_threshold": 0.5,
    "max_captions": 8,
    "shuffle_seed": None,
    "temperature": 0.07,
    "normalize_embeddings": True,
    "per_mask_mean": True,
    "formula_literal_denominator": False,
    "lambda_obj": 2.0,
    "lambda_dice": 5.0,
    "lambda_bce": 2.0,
    "lambda_cap": 1.0,
    "threads": 1,
    "entropy_scale": 1.0,
    "stopwords": [
        "a", "an", "the", "and", "or", "of", "in", "on", "at", "to", "with",
        "is", "are", "it", "its", "this", "that", "there", "by", "for", "from",
        "as", "be", "has", "have", "which", "near", "next",
    ],
    "log_level": "INFO",
    "log_file": None,
}

# Frame subsampling used when preprocessing each source dataset
DATASET_FRAME_STRIDES = {
    "scannet": 20,
    "scannet++": 10,
    "arkitscenes": 10,
    "matterport3d": 1,
    "structured3d": 1,
}

CONFIG_FILE = "config.json"


NUMERIC_KEYS = {"epsilon", "iou_threshold", "temperature", "lambda_obj", "lambda_dice",
                "lambda_bce", "lambda_cap", "entropy_scale"}
INTEGER_KEYS = {"frame_stride", "max_captions", "shuffle_seed", "threads"}
BOOLEAN_KEYS = {"normalize_embeddings", "per_mask_mean", "formula_literal_denominator"}
STRING_KEYS = {"dataset", "log_level", "log_file"}


def _check_type(key: str, value: Any, path: str) -> None:
    if value is None and DEFAULT_CONFIG[key] is None:
        return
    if key in BOOLEAN_KEYS:
        ok = isinstance(value, bool)
    elif key in INTEGER_KEYS:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif key in NUMERIC_KEYS:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif key in STRING_KEYS:
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    if not ok:
        raise FormatError(f"config file {path}: invalid value for '{key}': {value!r}")


def load_config(config_file: Optional[str] = None) -> Dict[str, Any]:
    """
    Load configuration from a JSON file if it exists,
    otherwise return default configuration.

    Args:
        config_file (Optional[str]): Path to the config file (defaults to config.json)

    Returns:
        Dict[str, Any]: Configuration dictionary

    Raises:
        FormatError: If the file exists but is not a JSON object
    """
    config = DEFAULT_CONFIG.copy()
    path = config_file or CONFIG_FILE

    if not os.path.exists(path):
        if config_file is not None:
            raise FormatError(f"config file not found: {path}")
        logging.info(f"No config file found at {path}. Using default configuration.")
        return config

    try:
        with open(path, "r", encoding="utf-8") as f:
            file_config = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read config file {path}: {e}")
    if not isinstance(file_config, dict):
        raise FormatError(f"config file {path} must hold a JSON object")

    unknown = sorted(set(file_config) - set(DEFAULT_CONFIG))
    if unknown:
        logging.warning(f"Ignoring unknown configuration keys in {path}: {', '.join(unknown)}")
    for key, value in file_config.items():
        if key in DEFAULT_CONFIG:
            _check_type(key, value, path)
            config[key] = value
    logging.info(f"Configuration loaded from {path}")
    return config


def apply_overrides(config: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """
    Overlay command-line values on a configuration; None values are skipped.

    Args:
        config (Dict[str, Any]): Base configuration
        overrides (Dict[str, Any]): Values given on the command line

    Returns:
        Dict[str, Any]: New configuration dictionary
    """
    merged = dict(config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
            logging.debug(f"Configuration override: {key} = {value}")
    return merged

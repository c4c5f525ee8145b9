"""
Utility functions for the mask-text engine.
Canonical JSON output and line-oriented JSON input helpers.
"""

import json
import math
from typing import Any, Dict, Iterable, Iterator, List, Tuple

import numpy as np

from errors import ContractError, FormatError

SIGNIFICANT_DIGITS = 6


def format_metric(value: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    """
    Round a float to a fixed number of significant digits.

    Args:
        value (float): Value to round
        digits (int): Significant digits

    Returns:
        float: Rounded value whose repr re-parses to itself
    """
    if not math.isfinite(value):
        raise ContractError(f"cannot serialize non-finite value {value}")
    return float(f"{value:.{digits}g}") + 0.0


def to_canonical(value: Any) -> Any:
    """Convert numpy scalars/arrays and round floats for canonical output."""
    if isinstance(value, dict):
        return {str(k): to_canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_canonical(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_canonical(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return format_metric(float(value))
    return value


def canonical_json(value: Any, indent: int = None) -> str:
    """
    Serialize with sorted keys and 6-significant-digit floats.

    Args:
        value (Any): JSON-compatible value (numpy types allowed)
        indent (int): Indentation for pretty output, None for one line

    Returns:
        str: Serialized text without a trailing newline
    """
    separators = (",", ": ") if indent is not None else (",", ":")
    return json.dumps(to_canonical(value), sort_keys=True, indent=indent,
                      separators=separators, ensure_ascii=False, allow_nan=False)


def write_json(path: str, value: Any) -> None:
    """Write a canonical, indented JSON document ending in a newline."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(canonical_json(value, indent=2))
        f.write("\n")


def write_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> int:
    """
    Write one canonical JSON object per line.

    Returns:
        int: Number of records written
    """
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(canonical_json(record))
            f.write("\n")
            count += 1
    return count


def read_json(path: str) -> Any:
    """Read a JSON document, mapping IO and syntax problems to FormatError."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise FormatError(f"file not found: {path}")
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot parse JSON file {path}: {e}")


def iter_jsonl(path: str) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    Yield (line number, object) for every non-blank line of a JSONL file.

    Raises:
        FormatError: If the file is missing or a line is not a JSON object
    """
    try:
        f = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"file not found: {path}")
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}")
    with f:
        try:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})")
                if not isinstance(record, dict):
                    raise FormatError(f"{path}:{lineno}: expected a JSON object")
                yield lineno, record
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: not valid UTF-8 ({e})")


def require_fields(record: Dict[str, Any], fields: List[str], where: str) -> None:
    """
    Check that a record carries every required field.

    Args:
        record (Dict[str, Any]): Parsed JSON object
        fields (List[str]): Required keys
        where (str): Location used in the error message
    """
    if not isinstance(record, dict):
        raise FormatError(f"{where}: expected a JSON object")
    missing = [name for name in fields if name not in record]
    if missing:
        raise FormatError(f"{where}: missing field(s) {', '.join(missing)}")


def require_int(value: Any, where: str, field: str) -> int:
    """
    Read an integer field; integral floats are accepted, booleans and strings are not.

    Args:
        value (Any): Parsed JSON value
        where (str): Location used in the error message
        field (str): Field name used in the error message

    Returns:
        int: The integer value
    """
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{where}: field '{field}' must be an integer, got {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise FormatError(f"{where}: field '{field}' must be an integer, got {value!r}")
    return int(value)


def require_float(value: Any, where: str, field: str) -> float:
    """Read a finite numeric field."""
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise FormatError(f"{where}: field '{field}' must be a finite number, got {value!r}")
    return float(value)


def require_list(value: Any, where: str, field: str) -> List[Any]:
    if not isinstance(value, list):
        raise FormatError(f"{where}: field '{field}' must be a list")
    return value

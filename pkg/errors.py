"""
Error types for the mask-text engine.
Library code raises these; main.py maps them to process exit codes.
"""

from typing import Optional


class MaskTextError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class FormatError(MaskTextError):
    """
    Raised when an input file or record is malformed.

    Args:
        message (str): Human-readable description naming the offending ids
        offset (Optional[int]): Byte offset of the problem, when known
    """

    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(MaskTextError):
    """Raised when a precondition or type invariant is violated."""

    exit_code = 3

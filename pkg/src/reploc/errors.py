"""Exception types shared across the toolkit.

The CLI maps ToolkitError subclasses to exit code 2 (bad input or
configuration) and NumericError to exit code 3 (numerical failure).
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class FormatError(ToolkitError):
    """A file does not conform to its declared binary or text format."""


class SizeMismatchError(FormatError):
    """A file's payload length disagrees with its header."""


class DataError(ToolkitError):
    """Values are invalid for the domain (non-finite, out of range)."""


class ShapeError(ToolkitError):
    """Array shapes are inconsistent with an operation's requirements."""


class ConfigError(ToolkitError):
    """A configuration object violates its invariants."""


class NumericError(ToolkitError):
    """A numerical failure occurred (non-finite gradient or loss)."""

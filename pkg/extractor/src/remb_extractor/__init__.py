"""Per-frame CNN embedding dumps in REMB format."""

__version__ = "0.1.0"

from .extract import ExtractorConfig, ExtractorError, extract

__all__ = ["ExtractorConfig", "ExtractorError", "extract"]

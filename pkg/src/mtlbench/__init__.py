"""Multi-task learning benchmark and negative-transfer diagnostics for tabular data."""

__version__ = "0.1.0"

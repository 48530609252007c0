"""
Utility functions and helper classes.

Logging setup and the worker pool used to run independent experiment arms.
"""

from .logger import setup_logger, get_logger, RunLoggerAdapter

__all__ = ["setup_logger", "get_logger", "RunLoggerAdapter"]

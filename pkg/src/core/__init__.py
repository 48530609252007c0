"""
Core components: configuration, error types, numerics and checkpoints.
"""

from .errors import L2DError, ConfigError
from .config import Settings, ConfigManager, get_settings

__all__ = ["L2DError", "ConfigError", "Settings", "ConfigManager", "get_settings"]

"""
Configuration management for the L2D toolkit.

Runtime settings come from environment variables (optionally via a ``.env``
file); experiment configurations come from JSON files and are mapped onto the
dataclasses each module defines. Every run echoes its full configuration back
into its artifact directory.
"""

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union, get_type_hints

from dotenv import load_dotenv

from .errors import ConfigError
from .numerics import Precision
from ..utils.logger import get_logger

logger = get_logger("config")

T = TypeVar("T")

_TRUE_VALUES = ('true', '1', 'yes', 'on')


@dataclass
class Settings:
    """Process-level settings (not part of an experiment's identity)."""

    artifact_root: str = "artifacts"
    log_level: str = "INFO"
    log_to_file: bool = True
    json_logs: bool = False
    workers: int = 1
    precision: str = "float32"

    def __post_init__(self):
        self.artifact_root = os.path.expanduser(self.artifact_root)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", field="workers")
        if self.precision not in [p.value for p in Precision]:
            raise ConfigError(f"L2D_PRECISION must be float32 or float64, got {self.precision!r}",
                              field="precision")


class ConfigManager:
    """Loads settings from the environment and experiment configs from JSON."""

    ENV_FILE = ".env"

    @classmethod
    def load_settings(cls) -> Settings:
        """Load settings from ``.env`` (if present) and the environment."""
        env_path = Path(cls.ENV_FILE)
        if env_path.exists():
            load_dotenv(env_path, override=False)

        settings = Settings()
        cls._load_from_env(settings)
        settings.__post_init__()
        return settings

    @staticmethod
    def _load_from_env(settings: Settings):
        """Apply ``L2D_*`` environment variables."""
        env_mappings = {
            'L2D_ARTIFACT_ROOT': 'artifact_root',
            'L2D_LOG_LEVEL': 'log_level',
            'L2D_PRECISION': 'precision',
        }
        for env_var, attr in env_mappings.items():
            value = os.getenv(env_var)
            if value:
                setattr(settings, attr, value)

        workers = os.getenv('L2D_WORKERS')
        if workers and workers.isdigit():
            settings.workers = int(workers)

        for env_var, attr in (('L2D_LOG_TO_FILE', 'log_to_file'),
                              ('L2D_JSON_LOGS', 'json_logs')):
            value = os.getenv(env_var)
            if value:
                setattr(settings, attr, value.lower() in _TRUE_VALUES)

    @staticmethod
    def read_json(path: Union[str, Path]) -> Dict[str, Any]:
        """Read a JSON config file, raising ``ConfigError`` on bad syntax."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Could not parse config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        return data

    @staticmethod
    def save_snapshot(config: Any, path: Union[str, Path]) -> Path:
        """Write a dataclass config as indented, key-sorted JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(to_jsonable(config), f, indent=2, sort_keys=True,
                      ensure_ascii=False)
            f.write("\n")
        return path


def to_jsonable(value: Any) -> Any:
    """Convert dataclasses/enums/paths into JSON-serialisable structures."""
    if is_dataclass(value) and not isinstance(value, type):
        return {k: to_jsonable(v) for k, v in asdict(value).items()}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def from_dict(cls: Type[T], data: Dict[str, Any], section: str = "") -> T:
    """
    Build dataclass ``cls`` from ``data``.

    Missing required fields raise ``ConfigError`` naming the dotted field path;
    nested dataclass fields are built recursively; unknown keys are ignored
    with a warning.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section or cls.__name__}' must be an object",
                          field=section or None)

    hints = get_type_hints(cls)
    kwargs: Dict[str, Any] = {}
    known = set()

    for f in fields(cls):
        known.add(f.name)
        dotted = f"{section}.{f.name}" if section else f.name
        required = (f.default is dataclasses.MISSING
                    and f.default_factory is dataclasses.MISSING)  # type: ignore[misc]

        if f.name not in data:
            if required:
                raise ConfigError(f"Missing required config field: {dotted}",
                                  field=dotted)
            continue

        value = data[f.name]
        field_type = hints.get(f.name)
        if isinstance(field_type, type) and is_dataclass(field_type) and isinstance(value, dict):
            value = from_dict(field_type, value, dotted)
        kwargs[f.name] = value

    for key in data:
        if key not in known:
            logger.warning(f"Ignoring unknown config field: "
                           f"{section + '.' if section else ''}{key}")

    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value in section '{section or cls.__name__}': {e}",
                          field=section or None) from e


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the process-wide settings instance."""
    global _settings
    if _settings is None:
        _settings = ConfigManager.load_settings()
    return _settings


def reset_settings() -> None:
    """Forget cached settings so the environment is read again."""
    global _settings
    _settings = None

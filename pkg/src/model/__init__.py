"""
Main-path transformer and LoRA adapters.
"""

from .base_lm import (
    BaseLm,
    BaseLmConfig,
    KvCache,
    base_checkpoint_config,
    load_base_lm,
    sample_token,
    save_base_lm,
)
from .lora import LoRALinear, inject_lora

__all__ = [
    "BaseLm",
    "BaseLmConfig",
    "KvCache",
    "LoRALinear",
    "base_checkpoint_config",
    "inject_lora",
    "load_base_lm",
    "sample_token",
    "save_base_lm",
]

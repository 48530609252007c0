"""
Training loops for the main path, the diffusion path and the LoRA baseline.
"""

from .trainer import (
    TrainConfig,
    TrainResult,
    baseline_lora_finetune,
    l2d_loss,
    lr_at,
    pretrain,
    train,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "baseline_lora_finetune",
    "l2d_loss",
    "lr_at",
    "pretrain",
    "train",
]

"""
Rectified-flow schedule and the diffusion path network.
"""

from .path import (
    DiffusionConfig,
    DiffusionPath,
    DiffusionVocab,
    build_vocab,
    init_from_main,
    load_path,
    path_checkpoint_config,
    save_path,
)
from .schedule import (
    DiffusionState,
    Schedule,
    corrupt,
    input_rescale,
    sample_timesteps,
    velocity,
)

__all__ = [
    "DiffusionConfig",
    "DiffusionPath",
    "DiffusionState",
    "DiffusionVocab",
    "Schedule",
    "build_vocab",
    "corrupt",
    "init_from_main",
    "input_rescale",
    "load_path",
    "path_checkpoint_config",
    "sample_timesteps",
    "save_path",
    "velocity",
]

"""
Pytest configuration and shared fixtures.

This module contains pytest configuration and fixtures that are available
to all test modules. Models are deliberately tiny so the whole unit suite
runs on a laptop CPU in seconds.
"""

import pytest
import tempfile
import shutil
from pathlib import Path
from typing import Any, Dict

import torch
from torch import nn

# Import project modules for testing
import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.config import reset_settings
from src.core.numerics import seeded
from src.diffusion.path import DiffusionConfig, DiffusionPath, init_from_main
from src.harness.tasks import CharTokenizer, TaskSizes, make_task
from src.model.base_lm import BaseLm, BaseLmConfig
from src.training.trainer import TrainConfig


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture
def isolated_settings(temp_dir, monkeypatch):
    """Settings pointing at a temporary artifact root, without file logging."""
    monkeypatch.setenv("L2D_ARTIFACT_ROOT", str(temp_dir / "artifacts"))
    monkeypatch.setenv("L2D_LOG_TO_FILE", "false")
    monkeypatch.setenv("L2D_WORKERS", "1")
    reset_settings()
    yield temp_dir / "artifacts"
    reset_settings()


@pytest.fixture
def tokenizer():
    return CharTokenizer()


@pytest.fixture
def tiny_base_config(tokenizer):
    """Two-layer main path over the task alphabet."""
    return BaseLmConfig(vocab_size=tokenizer.vocab_size, d_model=32, n_layers=2,
                        n_heads=2, max_seq_len=64, init_seed=0)


@pytest.fixture
def tiny_base(tiny_base_config):
    """Frozen, randomly initialised main path."""
    return BaseLm(tiny_base_config).freeze()


@pytest.fixture
def tiny_diffusion_config():
    return DiffusionConfig(d_bar=16, sigma=64.0, time_embed_dim=32, cond_dim=32,
                           lora_rank=4, lora_alpha=8.0, init_seed=1)


@pytest.fixture
def tiny_path(tiny_base, tiny_diffusion_config):
    """Freshly initialised diffusion path (zero output gate)."""
    return init_from_main(tiny_base, tiny_diffusion_config)


@pytest.fixture
def perturbed_path(tiny_path, model_helper):
    """Diffusion path whose zero-initialised layers carry random weights."""
    return model_helper.perturb(tiny_path)


@pytest.fixture
def small_sizes():
    return TaskSizes(n_examples=60, payload_len=3, n_symbols=5, n_operands=2,
                     n_distractors=1, n_pairs=2, prime=7)


@pytest.fixture
def copy_task(small_sizes, tokenizer):
    return make_task("copy", small_sizes, seed=0, tokenizer=tokenizer)


@pytest.fixture
def recall_task(small_sizes, tokenizer):
    return make_task("keyed_recall", small_sizes, seed=0, tokenizer=tokenizer)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(lr_peak=1e-3, lr_floor=1e-5, warmup_steps=2, steps=6, batch_size=8,
                       max_seq_len=64, eval_every=3, checkpoint_every=3, n_val_examples=16)


@pytest.fixture
def experiment_dict() -> Dict[str, Any]:
    """Smallest experiment config that exercises every stage."""
    return {
        "name": "tiny",
        "tasks": ["copy", "keyed_recall"],
        "seeds": [0],
        "sizes": {"n_examples": 60, "payload_len": 3, "n_symbols": 5, "n_operands": 2,
                  "n_distractors": 1, "n_pairs": 2},
        "base": {"d_model": 32, "n_layers": 2, "n_heads": 2, "max_seq_len": 32},
        "diffusion": {"d_bar": 16, "time_embed_dim": 32, "cond_dim": 32, "lora_rank": 4,
                      "lora_alpha": 8.0},
        "pretrain": {"lr_peak": 1e-3, "warmup_steps": 1, "steps": 4, "batch_size": 8,
                     "eval_every": 2, "checkpoint_every": 4, "max_seq_len": 32},
        "l2d": {"lr_peak": 1e-3, "warmup_steps": 1, "steps": 3, "batch_size": 8,
                "eval_every": 3, "checkpoint_every": 3, "max_seq_len": 32},
        "baseline": {"lr_peak": 1e-3, "warmup_steps": 1, "steps": 3, "batch_size": 8,
                     "eval_every": 3, "checkpoint_every": 3, "max_seq_len": 32,
                     "lora_rank": 4, "lora_alpha": 8.0},
        "eval": {"budgets": [1, 3], "split": "train", "max_examples": 3, "write_traces": True},
    }


# Pytest configuration
def pytest_configure(config):
    """Configure pytest."""
    config.addinivalue_line(
        "markers",
        "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers",
        "integration: marks tests as integration tests"
    )
    config.addinivalue_line(
        "markers",
        "unit: marks tests as unit tests"
    )


def pytest_collection_modifyitems(config, items):
    """Automatically mark tests based on location."""
    for item in items:
        # Mark tests in integration folder as integration tests
        if "integration" in str(item.fspath):
            item.add_marker(pytest.mark.integration)
        # Mark tests in unit folder as unit tests
        elif "unit" in str(item.fspath):
            item.add_marker(pytest.mark.unit)


# Test utilities
class ModelHelper:
    """Helper class with utility methods for model tests."""

    @staticmethod
    def perturb(path: DiffusionPath, seed: int = 7, std: float = 0.05) -> DiffusionPath:
        """Give the zero-initialised modulation and gate layers random weights."""
        layers = [path.gate_net[-1], path.out_modulation]
        layers += [block.modulation for block in path.blocks]
        with seeded(seed), torch.no_grad():
            for layer in layers:
                nn.init.normal_(layer.weight, std=std)
                nn.init.normal_(layer.bias, std=std)
            for name, p in path.named_parameters():
                if name.endswith("lora_B"):
                    nn.init.normal_(p, std=std)
        return path

    @staticmethod
    def prompt_cache(base: BaseLm, length: int = 5, batch: int = 1, seed: int = 0):
        """Cache of a random prompt; returns (tokens, logits, cache)."""
        generator = torch.Generator().manual_seed(seed)
        tokens = torch.randint(0, base.config.vocab_size, (batch, length), generator=generator)
        logits, cache = base.forward_with_cache(tokens)
        return tokens, logits, cache

    @staticmethod
    def assert_file_exists(path: Path):
        """Assert that a file exists."""
        assert path.exists(), f"File does not exist: {path}"


@pytest.fixture
def model_helper():
    """Provide model helper utilities."""
    return ModelHelper()

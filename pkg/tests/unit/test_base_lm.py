"""
Unit tests for the main-path transformer and its KV cache.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import pytest
import torch

from src.core.errors import (CacheError, CheckpointError, ConfigError,
                             ContextOverflowError, NonFiniteError)
from src.core.numerics import make_generator, parameter_digest
from src.model.base_lm import (BaseLm, BaseLmConfig, KvCache, base_checkpoint_config,
                               load_base_lm, sample_token, save_base_lm)


class TestBaseLmConfig:
    """Test configuration validation."""

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError) as excinfo:
            BaseLmConfig(d_model=30, n_heads=4)
        assert excinfo.value.field == "d_model"

    def test_unknown_position_encoding(self):
        with pytest.raises(ConfigError) as excinfo:
            BaseLmConfig(position_encoding="alibi")
        assert excinfo.value.field == "position_encoding"

    def test_rotary_needs_even_head_dim(self):
        with pytest.raises(ConfigError):
            BaseLmConfig(d_model=12, n_heads=4)

    def test_tiny_vocab(self):
        with pytest.raises(ConfigError):
            BaseLmConfig(vocab_size=1)


class TestForward:
    """Test the forward pass and cache behaviour."""

    def test_logit_shape(self, tiny_base, tiny_base_config):
        logits = tiny_base([1, 5, 7])
        assert logits.shape == (1, 3, tiny_base_config.vocab_size)

    def test_incremental_matches_full(self, tiny_base, model_helper):
        tokens, full_logits, full_cache = model_helper.prompt_cache(tiny_base, length=8)

        logits_a, cache = tiny_base.forward_with_cache(tokens[:, :5])
        logits_b, cache = tiny_base.forward_with_cache(tokens[:, 5:6], cache)
        logits_c, cache = tiny_base.forward_with_cache(tokens[:, 6:], cache)
        incremental = torch.cat((logits_a, logits_b, logits_c), dim=1)

        assert torch.allclose(incremental, full_logits, atol=1e-5)
        assert cache.length == 8
        assert torch.allclose(cache.latents, full_cache.latents, atol=1e-5)
        for k_inc, k_full in zip(cache.keys, full_cache.keys):
            assert torch.allclose(k_inc, k_full, atol=1e-5)

    def test_learned_positions(self, tokenizer):
        model = BaseLm(BaseLmConfig(vocab_size=tokenizer.vocab_size, d_model=16, n_layers=1,
                                    n_heads=2, max_seq_len=16, position_encoding="learned"))
        tokens = torch.tensor([[3, 4, 5, 6]])
        full, _ = model.forward_with_cache(tokens)
        first, cache = model.forward_with_cache(tokens[:, :2])
        second, _ = model.forward_with_cache(tokens[:, 2:], cache)
        assert torch.allclose(torch.cat((first, second), dim=1), full, atol=1e-5)

    def test_causality(self, tiny_base):
        """Changing a later token does not change earlier logits."""
        a = tiny_base(torch.tensor([[1, 2, 3, 4]]))
        b = tiny_base(torch.tensor([[1, 2, 3, 9]]))
        assert torch.allclose(a[:, :3], b[:, :3], atol=1e-6)
        assert not torch.allclose(a[:, 3], b[:, 3])

    def test_batched_equals_single(self, tiny_base):
        batch = torch.tensor([[1, 2, 3], [4, 5, 6]])
        logits = tiny_base(batch)
        assert torch.allclose(logits[1:], tiny_base(batch[1:]), atol=1e-6)

    def test_context_overflow(self, tiny_base, tiny_base_config):
        tokens = torch.zeros(1, tiny_base_config.max_seq_len, dtype=torch.long)
        _, cache = tiny_base.forward_with_cache(tokens)
        with pytest.raises(ContextOverflowError):
            tiny_base.forward_with_cache([1], cache)

    def test_empty_input(self, tiny_base):
        with pytest.raises(ValueError):
            tiny_base.forward_with_cache(torch.zeros(1, 0, dtype=torch.long))

    def test_batch_mismatch(self, tiny_base, model_helper):
        _, _, cache = model_helper.prompt_cache(tiny_base, length=3, batch=2)
        with pytest.raises(CacheError):
            tiny_base.forward_with_cache(torch.tensor([[1]]), cache)

    def test_counters(self, tiny_base):
        tiny_base.reset_counters()
        _, cache = tiny_base.forward_with_cache(torch.tensor([[1, 2, 3]]))
        tiny_base.forward_with_cache(torch.tensor([[4]]), cache)

        assert tiny_base.forward_calls == 2
        assert tiny_base.positions_processed == 4

    def test_counters_under_threads(self, tiny_base):
        """Concurrent runs sharing one main path lose no counter updates."""
        tiny_base.reset_counters()
        tokens = torch.tensor([[1, 2, 3]])

        def work(_):
            with torch.no_grad():
                for _ in range(25):
                    tiny_base.forward_with_cache(tokens)

        with ThreadPoolExecutor(max_workers=4) as pool:
            list(pool.map(work, range(8)))

        assert tiny_base.forward_calls == 200
        assert tiny_base.positions_processed == 600

    def test_cache_is_not_mutated(self, tiny_base):
        _, cache = tiny_base.forward_with_cache([1, 2])
        tiny_base.forward_with_cache([3], cache)
        assert cache.length == 2

    def test_empty_cache(self):
        cache = KvCache.empty()
        assert cache.length == 0
        assert cache.batch_size is None
        assert cache.layer(0) == (None, None)


class TestInitialisation:
    """Test seeded initialisation and freezing."""

    def test_seeded_init_is_reproducible(self, tiny_base_config):
        assert parameter_digest(BaseLm(tiny_base_config)) == \
            parameter_digest(BaseLm(tiny_base_config))

    def test_zero_init_head_gives_uniform_logits(self, tiny_base_config):
        tiny_base_config.zero_init_head = True
        model = BaseLm(tiny_base_config)
        assert torch.count_nonzero(model([1, 2, 3])) == 0

    def test_freeze(self, tiny_base_config):
        model = BaseLm(tiny_base_config)
        assert not model.is_frozen
        model.freeze()
        assert model.is_frozen
        assert not model.training


class TestSampleToken:
    """Test greedy and temperature sampling."""

    def test_greedy_takes_first_maximum(self):
        assert sample_token(torch.tensor([0.0, 2.0, 2.0, 1.0]), 0.0) == 1

    def test_batched_greedy(self):
        logits = torch.tensor([[0.0, 1.0], [3.0, 0.0]])
        assert sample_token(logits, 0.0).tolist() == [1, 0]

    def test_sampling_is_reproducible(self):
        logits = torch.zeros(10)
        first = [sample_token(logits, 1.0, make_generator(4)) for _ in range(3)]
        second = [sample_token(logits, 1.0, make_generator(4)) for _ in range(3)]
        assert first == second

    def test_low_temperature_concentrates(self):
        logits = torch.tensor([0.0, 5.0, 0.0])
        generator = make_generator(0)
        picks = {sample_token(logits, 0.05, generator) for _ in range(20)}
        assert picks == {1}

    def test_frequencies_match_softmax(self):
        """Empirical frequencies stay within 3 sigma of softmax(logits / T)."""
        logits = torch.tensor([2.0, 1.0, 0.0, -1.0])
        n, temperature = 20000, 0.7
        draws = sample_token(logits.expand(n, -1), temperature, make_generator(11))

        counts = torch.bincount(draws, minlength=4).to(torch.float64)
        probs = torch.softmax(logits.to(torch.float64) / temperature, dim=-1)
        sigma = torch.sqrt(n * probs * (1 - probs))
        assert torch.all((counts - n * probs).abs() <= 3 * sigma), counts

    def test_negative_temperature(self):
        with pytest.raises(ValueError):
            sample_token(torch.zeros(3), -1.0)

    def test_non_finite_logits(self):
        with pytest.raises(NonFiniteError):
            sample_token(torch.tensor([0.0, float("nan")]), 0.0)


class TestBaseLmCheckpoint:
    """Test saving and loading the main path."""

    def test_roundtrip(self, tiny_base, temp_dir):
        path = save_base_lm(tiny_base, temp_dir / "base.safetensors")
        loaded = load_base_lm(path)

        assert loaded.config == tiny_base.config
        assert parameter_digest(loaded) == parameter_digest(tiny_base)

    def test_wrong_kind(self, tiny_path, temp_dir):
        from src.diffusion.path import save_path

        path = save_path(tiny_path, temp_dir / "path.safetensors")
        with pytest.raises(CheckpointError):
            load_base_lm(path)

    def test_matching_config_loads(self, tiny_base, temp_dir):
        training = {"lr_peak": 1e-3, "steps": 4}
        path = save_base_lm(tiny_base, temp_dir / "base.safetensors", training)
        loaded = load_base_lm(path, base_checkpoint_config(tiny_base.config, training))
        assert parameter_digest(loaded) == parameter_digest(tiny_base)

    def test_mismatched_config_names_field(self, tiny_base, temp_dir):
        path = save_base_lm(tiny_base, temp_dir / "base.safetensors")
        deeper = replace(tiny_base.config, n_layers=tiny_base.config.n_layers + 1)

        with pytest.raises(CheckpointError) as excinfo:
            load_base_lm(path, base_checkpoint_config(deeper))
        assert excinfo.value.field == "base.n_layers"

    def test_mismatched_training_names_field(self, tiny_base, temp_dir):
        path = save_base_lm(tiny_base, temp_dir / "base.safetensors", {"steps": 4})

        with pytest.raises(CheckpointError) as excinfo:
            load_base_lm(path, base_checkpoint_config(tiny_base.config, {"steps": 8}))
        assert excinfo.value.field == "train.steps"

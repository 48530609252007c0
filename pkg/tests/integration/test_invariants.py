"""
Integration tests for the guarantees the diffusion path makes about the
frozen main path: exact agreement at t = 0, one main-path pass per token,
guidance identities and per-position independence.
"""

import math

import pytest
import torch
import torch.nn.functional as F

from src.core.numerics import make_generator, parameter_digest
from src.diffusion.path import NULL_CLASS
from src.diffusion.schedule import DiffusionState, corrupt
from src.inference.generation import (GuidanceSpec, PredictionMode, base_generate,
                                      generate_sequence, guided_logits)
from src.inference.solvers import SolverSpec
from src.training.trainer import draw_diffusion, l2d_loss, make_batch, train


class TestZeroTimeIdentity:
    """At t = 0 the diffusion path reproduces the main path."""

    def test_random_contexts(self, perturbed_path, tiny_base, tiny_base_config):
        generator = make_generator(11)
        worst = 0.0
        for trial in range(100):
            length = int(torch.randint(1, 20, (1,), generator=generator))
            tokens = torch.randint(0, tiny_base_config.vocab_size, (1, length),
                                   generator=generator)
            _, cache = tiny_base.forward_with_cache(tokens)
            positions = torch.tensor([length - 1])
            x = torch.randn(1, 1, perturbed_path.d_bar, generator=generator) * 64.0
            with torch.no_grad():
                logits = perturbed_path(DiffusionState(x, torch.zeros(1, 1)), trial % 5,
                                        cache, positions)
            expected = tiny_base.logits_from_latent(cache.latents[:, positions])
            worst = max(worst, float((logits - expected).abs().max()))
        assert worst <= 1e-6

    @pytest.mark.parametrize("temperature", [0.0, 1.0])
    def test_single_pass_generation_equals_base(self, perturbed_path, tiny_base, copy_task,
                                                temperature):
        prompt = copy_task.train[0].prompt
        mode = PredictionMode(final_temperature=temperature)
        for seed in range(3):
            ours = generate_sequence(tiny_base, perturbed_path, prompt, 6, 1, mode=mode,
                                     generator=make_generator(seed))
            theirs = base_generate(tiny_base, prompt, 6, temperature, make_generator(seed))
            assert ours == theirs


class TestCacheEfficiency:
    """The main path runs once per generated token whatever the budget."""

    @pytest.mark.parametrize("budget", [1, 15, 127])
    def test_forward_count_independent_of_budget(self, perturbed_path, tiny_base, copy_task,
                                                 budget):
        prompt = copy_task.train[0].prompt
        tiny_base.reset_counters()
        perturbed_path.reset_counters()
        generate_sequence(tiny_base, perturbed_path, prompt, 3, budget,
                          generator=make_generator(0))

        assert tiny_base.forward_calls == 1 + 3
        assert perturbed_path.forward_calls == 3 * SolverSpec.from_budget(budget).expected_evals


class TestGuidanceIdentities:
    """Guidance at w_g = 1 and w_g = 0 selects one branch exactly."""

    def test_path_level_identities(self, perturbed_path, tiny_base, model_helper):
        _, _, cache = model_helper.prompt_cache(tiny_base, length=4)
        x = torch.randn(1, 1, perturbed_path.d_bar, generator=make_generator(2)) * 64.0
        state = DiffusionState(x, torch.full((1, 1), 0.4))
        with torch.no_grad():
            cond = perturbed_path(state, 2, cache, [3])
            uncond = perturbed_path(state, NULL_CLASS, cache, [3])

        assert torch.equal(guided_logits(cond, uncond, 1.0), cond)
        assert torch.equal(guided_logits(cond, uncond, 0.0), uncond)

    def test_unit_strength_matches_conditional_generation(self, perturbed_path, tiny_base,
                                                          copy_task):
        prompt = copy_task.train[0].prompt
        guided = generate_sequence(tiny_base, perturbed_path, prompt, 4, 5,
                                   GuidanceSpec(copy_task.class_id, 1.0),
                                   generator=make_generator(3))
        conditional = generate_sequence(tiny_base, perturbed_path, prompt, 4, 5,
                                        class_id=copy_task.class_id,
                                        generator=make_generator(3))
        assert guided == conditional


class TestPerPositionParallelism:
    """Scoring all positions at once equals scoring them one by one."""

    def test_batched_equals_looped(self, perturbed_path, tiny_base, recall_task):
        pad = recall_task.tokenizer.pad_id
        batch = make_batch(recall_task.train[:4], pad, loss_on="all")
        batch = draw_diffusion(batch, perturbed_path.d_bar, 64.0, make_generator(0))

        with torch.no_grad():
            _, cache = tiny_base.forward_with_cache(batch.tokens)
            vocab = perturbed_path.vocab()
            state = corrupt(vocab.embed(batch.targets), batch.timesteps,
                            perturbed_path.schedule, noise=batch.noise)
            batched = perturbed_path(state, batch.class_ids, cache, batch.positions)
            looped = torch.cat([
                perturbed_path(DiffusionState(state.x[:, k:k + 1], state.t[:, k:k + 1]),
                               batch.class_ids, cache, [k])
                for k in range(batch.positions.numel())
            ], dim=1)

        ce_batched = F.cross_entropy(batched.transpose(1, 2), batch.targets, reduction="none")
        ce_looped = F.cross_entropy(looped.transpose(1, 2), batch.targets, reduction="none")
        assert float((ce_batched - ce_looped).abs().max()) <= 1e-5


class TestTrainingInvariants:
    """Training leaves the main path and the vocabulary geometry intact."""

    def test_main_path_immutable_and_vocab_normalised(self, tiny_base, tiny_path, copy_task,
                                                      tiny_train_config):
        digest = parameter_digest(tiny_base)
        train(tiny_train_config, tiny_base, tiny_path, copy_task.train, [],
              copy_task.tokenizer.pad_id)

        norms = tiny_path.vocab().table.norm(dim=-1)
        assert parameter_digest(tiny_base) == digest
        assert torch.allclose(norms, torch.full_like(norms, math.sqrt(tiny_path.d_bar)),
                              atol=1e-5)

    def test_trained_path_still_exact_at_zero(self, tiny_base, tiny_path, copy_task,
                                              tiny_train_config, model_helper):
        train(tiny_train_config, tiny_base, tiny_path, copy_task.train, [],
              copy_task.tokenizer.pad_id)
        _, _, cache = model_helper.prompt_cache(tiny_base, length=6)
        x = torch.randn(1, 1, tiny_path.d_bar, generator=make_generator(9)) * 64.0
        with torch.no_grad():
            logits = tiny_path(DiffusionState(x, torch.zeros(1, 1)), 1, cache, [5])
        expected = tiny_base.logits_from_latent(cache.latents[:, [5]])
        assert torch.equal(logits, expected)

    def test_loss_is_finite_and_positive(self, perturbed_path, tiny_base, copy_task):
        batch = make_batch(copy_task.train[:3], copy_task.tokenizer.pad_id)
        batch = draw_diffusion(batch, perturbed_path.d_bar, 64.0, make_generator(4))
        loss = l2d_loss(batch, tiny_base, perturbed_path)
        assert math.isfinite(loss.item())
        assert loss.item() > 0

"""
Longer-running acceptance checks on a desk-scale setup.

These train real (if small) models for a few hundred steps and are
deselected by default; run them with ``pytest -m slow``.
"""

import pytest
import torch

from src.diffusion.path import DiffusionConfig, init_from_main
from src.harness.evaluation import evaluate
from src.harness.tasks import TaskSizes, make_task
from src.model.base_lm import BaseLmConfig
from src.training.trainer import (TrainConfig, baseline_lora_finetune, evaluate_lm_loss,
                                  evaluate_loss_grid, pretrain, train)

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def recall_setup():
    """Keyed-recall task with a briefly pretrained, frozen main path."""
    sizes = TaskSizes(n_examples=600, n_pairs=3, n_symbols=8)
    task = make_task("keyed_recall", sizes, seed=0)
    model_config = BaseLmConfig(vocab_size=task.tokenizer.vocab_size, d_model=64,
                                n_layers=2, n_heads=4, max_seq_len=64)
    pretrain_config = TrainConfig(lr_peak=1e-3, warmup_steps=20, steps=200, batch_size=32,
                                  max_seq_len=64, eval_every=100, n_val_examples=64)
    base, _ = pretrain(pretrain_config, model_config, task.train, task.val,
                       task.tokenizer.pad_id)
    return task, base.freeze()


@pytest.fixture(scope="module")
def trained_paths(recall_setup):
    """One diffusion path per seed on the shared main path."""
    task, base = recall_setup
    paths = {}
    for seed in SEEDS:
        path = init_from_main(base, DiffusionConfig(d_bar=32, sigma=64.0, lora_rank=8,
                                                    lora_alpha=16.0, init_seed=seed))
        config = TrainConfig(lr_peak=1e-3, warmup_steps=30, steps=400, batch_size=32,
                             max_seq_len=64, eval_every=200, checkpoint_every=400,
                             n_val_examples=64, seed=seed)
        train(config, base, path, task.train, task.val, task.tokenizer.pad_id)
        paths[seed] = (path, config)
    return paths


class TestDiffusionLossGrid:
    """After training, the diffusion loss falls as the input gets cleaner."""

    def test_mean_loss_non_increasing_in_t(self, recall_setup, trained_paths):
        task, base = recall_setup
        grids = [evaluate_loss_grid(base, path, task.val, config, task.tokenizer.pad_id)
                 for path, config in trained_paths.values()]
        times = sorted(grids[0])
        losses = [sum(grid[t] for grid in grids) / len(grids) for t in times]

        slack = 0.02 * losses[0]
        for earlier, later in zip(losses, losses[1:]):
            assert later <= earlier + slack, losses
        assert losses[-1] < losses[0]


class TestStepScaling:
    """More diffusion steps per token buy accuracy."""

    def test_fifteen_steps_beat_one(self, recall_setup, trained_paths):
        task, base = recall_setup
        by_budget = {1: [], 15: []}
        for seed, (path, _) in trained_paths.items():
            report = evaluate(base, path, task, budgets=(1, 15), seeds=(seed,),
                              split="val", max_examples=100, include_base=False)
            for budget in by_budget:
                by_budget[budget].append(report.mean_accuracy("l2d", budget))

        one = sum(by_budget[1]) / len(SEEDS)
        fifteen = sum(by_budget[15]) / len(SEEDS)
        assert fifteen > one, by_budget


class TestCopyPretraining:
    """A two-layer main path learns to copy."""

    def test_final_token_accuracy(self):
        sizes = TaskSizes(n_examples=1000, payload_len=4, n_symbols=8)
        task = make_task("copy", sizes, seed=0)
        model_config = BaseLmConfig(vocab_size=task.tokenizer.vocab_size, d_model=64,
                                    n_layers=2, n_heads=4, max_seq_len=32)
        config = TrainConfig(lr_peak=1e-3, warmup_steps=100, steps=2000, batch_size=32,
                             max_seq_len=32, eval_every=500, checkpoint_every=2000,
                             n_val_examples=64)
        model, _ = pretrain(config, model_config, task.train, task.val, task.tokenizer.pad_id)

        hits = 0
        with torch.no_grad():
            for example in task.val:
                tokens = example.tokens
                logits = model(torch.tensor([tokens]))
                # last payload token sits just before EOS
                hits += int(logits[0, len(tokens) - 3].argmax()) == tokens[-2]
        assert hits / len(task.val) > 0.9


class TestBaselineFinetune:
    """LoRA finetuning of the main path improves its validation loss."""

    def test_baseline_beats_frozen_base(self, recall_setup):
        task, base = recall_setup
        config = TrainConfig(lr_peak=1e-3, warmup_steps=20, steps=300, batch_size=32,
                             max_seq_len=64, eval_every=150, checkpoint_every=300,
                             n_val_examples=64, lora_rank=8, lora_alpha=16.0)
        before = evaluate_lm_loss(base, task.val, config, task.tokenizer.pad_id)
        model, _ = baseline_lora_finetune(config, base, task.train, task.val,
                                          task.tokenizer.pad_id)
        after = evaluate_lm_loss(model, task.val, config, task.tokenizer.pad_id)

        assert after < before

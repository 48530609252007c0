"""
Unit tests for low-rank adaptation layers.
"""

import pytest
import torch
from torch import nn

from src.core.errors import ConfigError
from src.core.numerics import seeded
from src.model.lora import (LoRALinear, freeze_all_but_lora, inject_lora,
                            lora_parameters, manifest_role)


class _TwoLayer(nn.Module):
    def __init__(self):
        super().__init__()
        self.q_proj = nn.Linear(6, 6, bias=False)
        self.fc_in = nn.Linear(6, 4)


class TestLoRALinear:
    """Test the wrapped linear layer."""

    def test_fresh_layer_matches_source(self):
        with seeded(0):
            linear = nn.Linear(5, 3)
            layer = LoRALinear.from_linear(linear, rank=2, alpha=4.0)
        x = torch.randn(4, 5)
        assert torch.allclose(layer(x), linear(x), atol=1e-6)

    def test_scaling_and_merged_weight(self):
        with seeded(1):
            layer = LoRALinear.from_linear(nn.Linear(4, 4, bias=False), rank=2, alpha=6.0)
            nn.init.normal_(layer.lora_B)
        x = torch.randn(3, 4)

        assert layer.scaling == 3.0
        assert torch.allclose(layer(x), x @ layer.merged_weight().t(), atol=1e-5)

    def test_only_factors_train(self):
        layer = LoRALinear(4, 4, rank=2, alpha=2.0, bias=True)
        trainable = {n for n, p in layer.named_parameters() if p.requires_grad}
        assert trainable == {"lora_A", "lora_B"}

    def test_source_is_untouched(self):
        linear = nn.Linear(3, 3)
        before = linear.weight.detach().clone()
        layer = LoRALinear.from_linear(linear, rank=1, alpha=1.0)
        with torch.no_grad():
            layer.weight.add_(1.0)
        assert torch.equal(linear.weight, before)

    @pytest.mark.parametrize("rank", [0, -2])
    def test_rank_must_be_positive(self, rank):
        with pytest.raises(ConfigError) as excinfo:
            LoRALinear(4, 4, rank=rank, alpha=1.0)
        assert excinfo.value.field == "lora_rank"


class TestInjection:
    """Test replacing layers inside a model."""

    def test_inject_targets(self):
        model = _TwoLayer()
        replaced = inject_lora(model, ["q_proj"], rank=2, alpha=2.0)

        assert replaced == ["q_proj"]
        assert isinstance(model.q_proj, LoRALinear)
        assert isinstance(model.fc_in, nn.Linear)

    def test_inject_rejects_bad_rank(self):
        with pytest.raises(ConfigError):
            inject_lora(_TwoLayer(), ["q_proj"], rank=0, alpha=1.0)

    def test_freeze_all_but_lora(self):
        model = _TwoLayer()
        inject_lora(model, ["q_proj", "fc_in"], rank=2, alpha=2.0)
        freeze_all_but_lora(model)

        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        assert trainable == set(lora_parameters(model))
        assert len(trainable) == 4

    def test_manifest_role(self):
        assert manifest_role("blocks.0.attn.q_proj.lora_A") == "lora"
        assert manifest_role("blocks.0.attn.q_proj.weight") == "frozen"
        assert manifest_role("head.weight", default="base") == "base"

"""
Low-rank adaptation of frozen linear layers.

``LoRALinear`` keeps a frozen copy of a weight and learns an additive update
``B @ A`` scaled by ``alpha / rank``. ``B`` starts at zero, so a freshly
wrapped layer computes exactly what the original layer computed.
"""

import math
from typing import Dict, Iterable, List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from ..core.errors import ConfigError


class LoRALinear(nn.Module):
    """Linear layer with a frozen base weight and a trainable low-rank delta."""

    def __init__(self, in_features: int, out_features: int, rank: int,
                 alpha: float, bias: bool = False):
        super().__init__()
        if rank <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {rank}", field="lora_rank")

        self.in_features = in_features
        self.out_features = out_features
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank

        self.weight = nn.Parameter(torch.empty(out_features, in_features),
                                   requires_grad=False)
        self.bias = (nn.Parameter(torch.zeros(out_features), requires_grad=False)
                     if bias else None)

        self.lora_A = nn.Parameter(torch.empty(rank, in_features))
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @classmethod
    def from_linear(cls, linear: nn.Linear, rank: int, alpha: float) -> "LoRALinear":
        """Wrap a copy of ``linear``'s weights; the source layer is untouched."""
        layer = cls(linear.in_features, linear.out_features, rank, alpha,
                    bias=linear.bias is not None).to(linear.weight.dtype)
        with torch.no_grad():
            layer.weight.copy_(linear.weight)
            if linear.bias is not None and layer.bias is not None:
                layer.bias.copy_(linear.bias)
        return layer

    def delta_weight(self) -> torch.Tensor:
        return (self.lora_B @ self.lora_A) * self.scaling

    def merged_weight(self) -> torch.Tensor:
        """Effective weight ``W + scaling * B @ A``."""
        return self.weight + self.delta_weight()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = F.linear(x, self.weight, self.bias)
        update = F.linear(F.linear(x, self.lora_A), self.lora_B)
        return base + update * self.scaling

    def extra_repr(self) -> str:
        return (f"in_features={self.in_features}, out_features={self.out_features}, "
                f"rank={self.rank}, alpha={self.alpha}")


def get_parent_module(model: nn.Module, full_name: str) -> nn.Module:
    """Return the parent of ``model``'s submodule named ``full_name``."""
    parent = model
    for part in full_name.split(".")[:-1]:
        parent = getattr(parent, part)
    return parent


def inject_lora(model: nn.Module, target_modules: Iterable[str], rank: int,
                alpha: float) -> List[str]:
    """
    Replace every ``nn.Linear`` whose name ends with a target by ``LoRALinear``.

    Returns:
        Dotted names of the replaced layers.
    """
    if rank <= 0:
        raise ConfigError(f"LoRA rank must be positive, got {rank}", field="lora_rank")

    targets = tuple(target_modules)
    replaced: List[str] = []
    for name, module in list(model.named_modules()):
        if not name or not isinstance(module, nn.Linear):
            continue
        if name.split(".")[-1] in targets:
            parent = get_parent_module(model, name)
            setattr(parent, name.split(".")[-1], LoRALinear.from_linear(module, rank, alpha))
            replaced.append(name)
    return replaced


def lora_parameters(model: nn.Module) -> Dict[str, nn.Parameter]:
    """Named LoRA factor parameters of ``model``."""
    return {name: p for name, p in model.named_parameters()
            if name.endswith("lora_A") or name.endswith("lora_B")}


def freeze_all_but_lora(model: nn.Module) -> None:
    """Disable gradients everywhere except on LoRA factors."""
    for name, p in model.named_parameters():
        p.requires_grad_(name.endswith("lora_A") or name.endswith("lora_B"))


def manifest_role(name: str, default: Optional[str] = None) -> str:
    """Checkpoint manifest role of a parameter name inside an adapted model."""
    if name.endswith("lora_A") or name.endswith("lora_B"):
        return "lora"
    return default or "frozen"

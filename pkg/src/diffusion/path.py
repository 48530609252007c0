"""
The parallel diffusion path.

A diffusion token for target position k is rescaled, translated into the main
path's width and pushed through copies of the main-path blocks in which
self-attention is replaced by cross-attention into the cached main-path keys
and values at positions <= k - 1. Every layer norm gets a time-conditioned
shift and scale and every residual branch a time-conditioned gate. The result
is merged into the main path's final latent at k - 1 through the output gate

    w_d(t) = gate_net(t, c) - gate_net(0, c)

which is exactly zero at t = 0, so the path reproduces the main path's
logits there no matter what it has learned.
"""

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from ..core.checkpoint import (ROLE_FROZEN, ROLE_LORA, ROLE_NEW, check_config,
                               load_checkpoint, save_checkpoint)
from ..core.errors import (CacheError, CheckpointError, ConfigError,
                           DegenerateProjectionError)
from ..core.numerics import parameter_digest, seeded
from ..model.base_lm import (MLP, BaseLm, BaseLmConfig, KvCache, apply_rotary, attend,
                             merge_heads, rotary_tables, split_heads)
from ..model.lora import LoRALinear
from ..utils.logger import get_logger
from .schedule import DiffusionState, Schedule, input_rescale

logger = get_logger("diffusion_path")

INIT_MODES = ("lora", "full", "scratch")
KV_SOURCES = ("same_block", "last_block")
GATE_KINDS = ("vector", "scalar")
CHECKPOINT_KIND = "diffusion_path"
NULL_CLASS = 0

# Layers of each block that are copied from the main path
COPIED_LINEARS = ("q_proj", "o_proj", "fc_in", "fc_out")


@dataclass
class DiffusionConfig:
    """Shape and initialisation of the diffusion path."""

    d_bar: int = 256
    sigma: float = 64.0
    time_embed_dim: int = 256
    cond_dim: int = 256
    time_scale: float = 1000.0
    n_classes: int = 4
    lora_rank: int = 16
    lora_alpha: float = 32.0
    init_mode: str = "lora"  # lora | full | scratch
    kv_source: str = "same_block"  # same_block | last_block
    gate_kind: str = "vector"  # vector | scalar
    init_seed: int = 1

    def __post_init__(self):
        if self.d_bar < 1:
            raise ConfigError("d_bar must be positive", field="d_bar")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive", field="sigma")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be a positive even number",
                              field="time_embed_dim")
        if self.n_classes < 0:
            raise ConfigError("n_classes must be >= 0", field="n_classes")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}", field="init_mode")
        if self.init_mode == "lora" and self.lora_rank <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {self.lora_rank}",
                              field="lora_rank")
        if self.kv_source not in KV_SOURCES:
            raise ConfigError(f"kv_source must be one of {KV_SOURCES}", field="kv_source")
        if self.gate_kind not in GATE_KINDS:
            raise ConfigError(f"gate_kind must be one of {GATE_KINDS}", field="gate_kind")


@dataclass
class DiffusionVocab:
    """Token embeddings projected to d_bar dimensions with norm sqrt(d_bar)."""

    table: torch.Tensor  # (vocab_size, d_bar)

    @property
    def d_bar(self) -> int:
        return self.table.shape[1]

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.table[token_ids]

    def expectation(self, probs: torch.Tensor) -> torch.Tensor:
        """Probability-weighted sum of embedding rows."""
        return probs.to(self.table.dtype) @ self.table


def build_vocab(embedding_table: torch.Tensor, projection: torch.Tensor,
                min_norm: float = 1e-8) -> DiffusionVocab:
    """
    Project main-path embeddings with ``projection`` (d_bar x d) and rescale
    every row to norm ``sqrt(d_bar)``.
    """
    projected = embedding_table @ projection.t()
    norms = projected.norm(dim=-1, keepdim=True)
    if (norms < min_norm).any():
        bad = torch.nonzero(norms.squeeze(-1) < min_norm).flatten().tolist()
        raise DegenerateProjectionError(f"projected embeddings of tokens {bad[:10]} "
                                        f"have norm below {min_norm}")
    d_bar = projection.shape[0]
    return DiffusionVocab(math.sqrt(d_bar) * projected / norms)


def timestep_features(t: torch.Tensor, dim: int, scale: float = 1000.0,
                      max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``t`` (any shape) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period)
                      * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64) * scale)[..., None] * freqs
    return torch.cat((torch.cos(args), torch.sin(args)), dim=-1).to(t.dtype)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


@dataclass
class TimeConditioning:
    """Everything the path derives from (t, class) for one forward pass."""

    cond: torch.Tensor                                # (B, K, cond_dim)
    block_modulations: List[Tuple[torch.Tensor, ...]]  # per block: 6 x (B, K, d)
    final_modulation: Tuple[torch.Tensor, torch.Tensor]
    output_gate: torch.Tensor                         # (B, K, d) or (B, K, 1)


class CrossAttention(nn.Module):
    """Queries from diffusion tokens; keys/values from the main-path cache."""

    def __init__(self, q_proj: nn.Module, o_proj: nn.Module, n_heads: int,
                 head_dim: int, rotary: bool, rope_base: float):
        super().__init__()
        self.q_proj = q_proj
        self.o_proj = o_proj
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.rotary = rotary
        self.rope_base = rope_base

    def forward(self, x: torch.Tensor, positions: torch.Tensor,
                keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        q = split_heads(self.q_proj(x), self.n_heads)
        if self.rotary:
            cos, sin = rotary_tables(positions, self.head_dim, self.rope_base, x.dtype)
            q = apply_rotary(q, cos, sin)
        mask = torch.arange(keys.shape[2])[None, :] <= positions[:, None]
        return self.o_proj(merge_heads(attend(q, keys, values, mask)))


class DiffusionBlock(nn.Module):
    """Cross-attention + MLP block with adaLN modulation and residual gates."""

    def __init__(self, ln1: nn.LayerNorm, attn: CrossAttention, ln2: nn.LayerNorm,
                 mlp: MLP, cond_dim: int):
        super().__init__()
        d = ln1.normalized_shape[0]
        self.ln1 = ln1
        self.attn = attn
        self.ln2 = ln2
        self.mlp = mlp
        # shift1, scale1, gate1, shift2, scale2, gate2
        self.modulation = nn.Linear(cond_dim, 6 * d)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, positions: torch.Tensor, keys: torch.Tensor,
                values: torch.Tensor, modulation: Tuple[torch.Tensor, ...]) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = modulation
        x = x + (1 + gate1) * self.attn(modulate(self.ln1(x), shift1, scale1),
                                        positions, keys, values)
        x = x + (1 + gate2) * self.mlp(modulate(self.ln2(x), shift2, scale2))
        return x


def _fresh_like(module: nn.Module) -> nn.Module:
    if isinstance(module, nn.Linear):
        layer = nn.Linear(module.in_features, module.out_features,
                          bias=module.bias is not None)
        nn.init.normal_(layer.weight, std=0.02)
        if layer.bias is not None:
            nn.init.zeros_(layer.bias)
        return layer
    if isinstance(module, nn.LayerNorm):
        return nn.LayerNorm(module.normalized_shape)
    if isinstance(module, nn.Embedding):
        layer = nn.Embedding(module.num_embeddings, module.embedding_dim)
        nn.init.normal_(layer.weight, std=0.02)
        return layer
    raise TypeError(f"cannot re-initialise {type(module).__name__}")


def copy_layer(module: nn.Module, mode: str, rank: int, alpha: float) -> nn.Module:
    """Copy a main-path layer for the diffusion path under ``mode``."""
    if mode == "scratch":
        return _fresh_like(module)
    if mode == "lora" and isinstance(module, nn.Linear):
        return LoRALinear.from_linear(module, rank, alpha)

    layer = copy.deepcopy(module)
    for p in layer.parameters():
        p.requires_grad_(mode == "full")
    return layer


class DiffusionPath(nn.Module):
    """Trainable path that refines next-token predictions from a diffusion token."""

    def __init__(self, base: BaseLm, config: DiffusionConfig):
        super().__init__()
        base_config = base.config
        d = base_config.d_model
        mode = config.init_mode
        self.config = config
        self.base_config = base_config
        self.schedule = Schedule(config.sigma)

        # Not a submodule: the frozen main path is never saved or optimised here
        self._base_ref = (base,)

        def copied(module: nn.Module) -> nn.Module:
            return copy_layer(module, mode, config.lora_rank, config.lora_alpha)

        with seeded(config.init_seed):
            self.vocab_proj = nn.Linear(d, config.d_bar, bias=False)
            self.translation = nn.Sequential(
                nn.Linear(config.d_bar, d),
                nn.SiLU(),
                nn.Linear(d, d),
            )
            self.class_emb = nn.Embedding(config.n_classes + 1, config.time_embed_dim)
            nn.init.normal_(self.class_emb.weight, std=0.02)
            self.time_mlp = nn.Sequential(
                nn.Linear(config.time_embed_dim, config.cond_dim),
                nn.SiLU(),
                nn.Linear(config.cond_dim, config.cond_dim),
            )
            gate_width = d if config.gate_kind == "vector" else 1
            self.gate_net = nn.Sequential(
                nn.Linear(config.time_embed_dim, config.cond_dim),
                nn.SiLU(),
                nn.Linear(config.cond_dim, gate_width),
            )
            nn.init.zeros_(self.gate_net[-1].weight)
            nn.init.zeros_(self.gate_net[-1].bias)

            blocks = []
            for main_block in base.blocks:
                attn = CrossAttention(
                    copied(main_block.attn.q_proj), copied(main_block.attn.o_proj),
                    base_config.n_heads, base_config.head_dim,
                    base_config.position_encoding == "rotary", base_config.rope_base,
                )
                mlp = MLP(base_config)
                mlp.fc_in = copied(main_block.mlp.fc_in)
                mlp.fc_out = copied(main_block.mlp.fc_out)
                blocks.append(DiffusionBlock(copied(main_block.ln1), attn,
                                             copied(main_block.ln2), mlp, config.cond_dim))
            self.blocks = nn.ModuleList(blocks)

            self.ln_out = copied(base.ln_f)
            self.out_modulation = nn.Linear(config.cond_dim, 2 * d)
            nn.init.zeros_(self.out_modulation.weight)
            nn.init.zeros_(self.out_modulation.bias)

            self.pos_emb = copied(base.pos_emb) if base.pos_emb is not None else None

        self.forward_calls = 0

    @property
    def base(self) -> BaseLm:
        return self._base_ref[0]

    @property
    def d_bar(self) -> int:
        return self.config.d_bar

    def vocab(self) -> DiffusionVocab:
        """Current diffusion vocabulary (rebuilt from the projection each call)."""
        return build_vocab(self.base.embedding_table, self.vocab_proj.weight)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def reset_counters(self) -> None:
        self.forward_calls = 0

    def _check_class_ids(self, class_ids: torch.Tensor) -> None:
        if (class_ids < 0).any() or (class_ids > self.config.n_classes).any():
            raise ValueError(f"class ids must lie in [0, {self.config.n_classes}]")

    def time_condition(self, t: torch.Tensor,
                       class_ids: Union[int, torch.Tensor]) -> TimeConditioning:
        """
        Derive the conditioning for timesteps ``t`` (B, K) and classes (B,).

        The output gate is evaluated twice with identical shapes, once at
        ``t`` and once at zero, so the difference is exactly zero at t = 0.
        """
        t = torch.as_tensor(t, dtype=self.class_emb.weight.dtype)
        if t.dim() == 0:
            t = t.reshape(1, 1)
        elif t.dim() == 1:
            t = t[:, None]
        batch, length = t.shape

        class_ids = torch.as_tensor(class_ids, dtype=torch.long)
        if class_ids.dim() == 0:
            class_ids = class_ids.expand(batch)
        self._check_class_ids(class_ids)
        if class_ids.dim() == 1:
            class_ids = class_ids[:, None]
        class_vectors = self.class_emb(class_ids.expand(batch, length))

        dim, scale = self.config.time_embed_dim, self.config.time_scale
        features = timestep_features(t, dim, scale) + class_vectors
        features_at_zero = timestep_features(torch.zeros_like(t), dim, scale) + class_vectors

        cond = self.time_mlp(features)
        activated = F.silu(cond)
        block_modulations = [tuple(block.modulation(activated).chunk(6, dim=-1))
                             for block in self.blocks]
        shift, scale_out = self.out_modulation(activated).chunk(2, dim=-1)
        output_gate = self.gate_net(features) - self.gate_net(features_at_zero)

        return TimeConditioning(cond, block_modulations, (shift, scale_out), output_gate)

    def forward(self, state: DiffusionState, class_ids: Union[int, torch.Tensor],
                cache: KvCache, positions: Union[Sequence[int], torch.Tensor],
                ) -> torch.Tensor:
        """
        Next-token logits for diffusion tokens at query positions ``positions``.

        Args:
            state: ``x`` of shape (B, K, d_bar) with timesteps broadcastable to (B, K).
            class_ids: Class per sequence, shape (B,) or a single int.
            cache: Main-path cache covering every query position.
            positions: (K,) index of the latent each diffusion token merges into
                (target position minus one).

        Returns:
            Logits of shape (B, K, vocab_size).
        """
        x = state.x
        if x.dim() != 3:
            raise ValueError(f"diffusion tokens must have shape (B, K, d_bar), "
                             f"got {tuple(x.shape)}")
        batch, length, _ = x.shape
        positions = torch.as_tensor(positions, dtype=torch.long).reshape(-1)
        if positions.numel() != length:
            raise ValueError(f"{positions.numel()} positions for {length} diffusion tokens")
        self._check_cache(cache, positions, batch)

        t = state.t[:, None] if state.t.dim() == 1 else state.t
        state = DiffusionState(x, t.expand(batch, length))
        t = state.t
        conditioning = self.time_condition(t, class_ids)

        h = self.translation(input_rescale(state, self.schedule))
        if self.pos_emb is not None:
            h = h + self.pos_emb(positions)[None]

        last = len(self.blocks) - 1
        for index, block in enumerate(self.blocks):
            source = index if self.config.kv_source == "same_block" else last
            h = block(h, positions, cache.keys[source], cache.values[source],
                      conditioning.block_modulations[index])

        shift, scale = conditioning.final_modulation
        h = modulate(self.ln_out(h), shift, scale)

        merged = cache.latents[:, positions] + conditioning.output_gate * h
        self.forward_calls += 1
        return self.base.logits_from_latent(merged)

    @staticmethod
    def _check_cache(cache: Optional[KvCache], positions: torch.Tensor, batch: int) -> None:
        if cache is None or cache.length == 0:
            raise CacheError("diffusion path needs a non-empty main-path cache")
        if positions.numel() and (positions.min() < 0 or positions.max() >= cache.length):
            raise CacheError(f"query positions {positions.tolist()} not covered by a "
                             f"cache of length {cache.length}")
        if cache.batch_size != batch:
            raise CacheError(f"cache batch {cache.batch_size} != diffusion batch {batch}")

    def manifest(self) -> Dict[str, str]:
        """Role of every tensor in the state dict."""
        params = dict(self.named_parameters())
        roles = {}
        for name in self.state_dict():
            if name.endswith("lora_A") or name.endswith("lora_B"):
                roles[name] = ROLE_LORA
            elif name in params and not params[name].requires_grad:
                roles[name] = ROLE_FROZEN
            else:
                roles[name] = ROLE_NEW
        return roles


def init_from_main(base: BaseLm, config: DiffusionConfig) -> DiffusionPath:
    """Build a diffusion path whose copied layers start from ``base``'s weights."""
    if not base.is_frozen:
        raise ValueError("the main path must be frozen before building a diffusion path")
    path = DiffusionPath(base, config)
    n_trainable = sum(p.numel() for p in path.trainable_parameters())
    logger.info(f"Initialised diffusion path ({config.init_mode} mode, "
                f"{n_trainable} trainable parameters)")
    return path


def path_checkpoint_config(config: DiffusionConfig, base_config: BaseLmConfig,
                           training: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Config sections stored with (and checked against) a diffusion-path checkpoint."""
    sections: Dict[str, Any] = {"diffusion": asdict(config), "base": asdict(base_config)}
    if training is not None:
        sections["train"] = training
    return sections


def save_path(path: DiffusionPath, file: Union[str, Path],
              training: Optional[Dict[str, Any]] = None) -> Path:
    """Write the diffusion path with its config and the main path's digest."""
    config = path_checkpoint_config(path.config, path.base_config, training)
    config["base_digest"] = parameter_digest(path.base)
    return save_checkpoint(file, dict(path.state_dict()), kind=CHECKPOINT_KIND,
                           config=config, manifest=path.manifest())


def load_path(file: Union[str, Path], base: BaseLm,
              expected: Optional[Dict[str, Any]] = None) -> DiffusionPath:
    """
    Load a diffusion path trained on top of exactly this ``base``.

    ``expected`` (as built by ``path_checkpoint_config``) must match the stored
    config, otherwise ``CheckpointError`` names the first differing field.
    """
    checkpoint = load_checkpoint(file, expected_kind=CHECKPOINT_KIND)
    if expected is not None:
        check_config(file, checkpoint.config, expected)
    if checkpoint.config.get("base_digest") != parameter_digest(base):
        raise CheckpointError(f"{file} was trained on a different main path")

    path = DiffusionPath(base, DiffusionConfig(**checkpoint.config["diffusion"]))
    dtype = torch.get_default_dtype()
    state = {k: v.to(dtype) for k, v in checkpoint.tensors.items()}
    missing, unexpected = path.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{file} does not match the diffusion path config: "
                              f"missing={missing}, unexpected={unexpected}")
    logger.info(f"Loaded diffusion path from {file}")
    return path

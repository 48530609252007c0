"""
The frozen main path: a small pre-norm decoder-only transformer.

Besides logits, ``forward_with_cache`` returns a ``KvCache`` holding every
block's rotated keys and values plus the post-final-norm latent of each
processed position. The diffusion path reads all three, so the main path runs
once per token no matter how many diffusion steps are spent on it.
"""

import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn
from typing_extensions import TypeAlias

from ..core.checkpoint import ROLE_BASE, check_config, load_checkpoint, save_checkpoint
from ..core.errors import (CacheError, CheckpointError, ConfigError,
                           ContextOverflowError, NonFiniteError)
from ..core.numerics import seeded
from ..utils.logger import get_logger

logger = get_logger("base_lm")

POSITION_ENCODINGS = ("rotary", "learned")
CHECKPOINT_KIND = "base_lm"

# Counters are shared by every run that evaluates on one frozen main path
_COUNTER_LOCK = threading.Lock()

TokenInput: TypeAlias = Union[torch.Tensor, Sequence[int]]


@dataclass
class BaseLmConfig:
    """Shape of the main-path transformer."""

    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    position_encoding: str = "rotary"  # rotary | learned
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    zero_init_head: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2", field="vocab_size")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})",
                field="d_model",
            )
        if self.position_encoding not in POSITION_ENCODINGS:
            raise ConfigError(
                f"position_encoding must be one of {POSITION_ENCODINGS}",
                field="position_encoding",
            )
        if self.position_encoding == "rotary" and self.head_dim % 2:
            raise ConfigError("rotary encoding needs an even head dimension",
                              field="n_heads")
        if self.n_layers < 1 or self.max_seq_len < 1:
            raise ConfigError("n_layers and max_seq_len must be positive",
                              field="n_layers")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float,
                  dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    half = head_dim // 2
    inv_freq = base ** (-torch.arange(half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (..., T, head_dim) by per-position angles."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
           mask: torch.Tensor) -> torch.Tensor:
    """
    Masked scaled dot-product attention.

    Args:
        q: (B, H, Tq, Dh)
        k, v: (B, H, Tk, Dh)
        mask: (Tq, Tk) boolean, True where attending is allowed
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    batch, length, width = x.shape
    return x.view(batch, length, n_heads, width // n_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    batch, heads, length, head_dim = x.shape
    return x.transpose(1, 2).reshape(batch, length, heads * head_dim)


class SelfAttention(nn.Module):
    """Causal multi-head self-attention over cached and new positions."""

    def __init__(self, config: BaseLmConfig):
        super().__init__()
        d = config.d_model
        self.config = config
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor, positions: torch.Tensor,
                past_k: Optional[torch.Tensor], past_v: Optional[torch.Tensor],
                ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        n_heads = self.config.n_heads
        q = split_heads(self.q_proj(x), n_heads)
        k = split_heads(self.k_proj(x), n_heads)
        v = split_heads(self.v_proj(x), n_heads)

        if self.config.position_encoding == "rotary":
            cos, sin = rotary_tables(positions, self.config.head_dim,
                                     self.config.rope_base, x.dtype)
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)

        if past_k is not None and past_v is not None:
            k = torch.cat((past_k, k), dim=2)
            v = torch.cat((past_v, v), dim=2)

        key_positions = torch.arange(k.shape[2])
        mask = key_positions[None, :] <= positions[:, None]
        out = attend(q, k, v, mask)
        return self.o_proj(merge_heads(out)), k, v


class MLP(nn.Module):
    """Position-wise feed-forward block."""

    def __init__(self, config: BaseLmConfig):
        super().__init__()
        hidden = config.d_model * config.mlp_ratio
        self.fc_in = nn.Linear(config.d_model, hidden)
        self.fc_out = nn.Linear(hidden, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_out(F.gelu(self.fc_in(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, config: BaseLmConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = SelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = MLP(config)

    def forward(self, x: torch.Tensor, positions: torch.Tensor,
                past_k: Optional[torch.Tensor], past_v: Optional[torch.Tensor],
                ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        attn_out, k, v = self.attn(self.ln1(x), positions, past_k, past_v)
        x = x + attn_out
        x = x + self.mlp(self.ln2(x))
        return x, k, v


@dataclass(frozen=True)
class KvCache:
    """
    Per-block keys/values and final latents for all processed positions.

    Instances are never mutated; ``extended`` returns a new cache.
    """

    keys: Tuple[torch.Tensor, ...] = ()     # per block: (B, H, L, Dh)
    values: Tuple[torch.Tensor, ...] = ()   # per block: (B, H, L, Dh)
    latents: Optional[torch.Tensor] = None  # (B, L, d), post final norm

    @classmethod
    def empty(cls) -> "KvCache":
        return cls()

    @property
    def length(self) -> int:
        return 0 if self.latents is None else self.latents.shape[1]

    @property
    def batch_size(self) -> Optional[int]:
        return None if self.latents is None else self.latents.shape[0]

    def layer(self, index: int) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        if not self.keys:
            return None, None
        return self.keys[index], self.values[index]

    def extended(self, keys: List[torch.Tensor], values: List[torch.Tensor],
                 new_latents: torch.Tensor) -> "KvCache":
        """New cache whose keys/values are the full (past + new) tensors."""
        latents = (new_latents if self.latents is None
                   else torch.cat((self.latents, new_latents), dim=1))
        return KvCache(tuple(keys), tuple(values), latents)

    def detached(self) -> "KvCache":
        if self.latents is None:
            return self
        return KvCache(tuple(k.detach() for k in self.keys),
                       tuple(v.detach() for v in self.values),
                       self.latents.detach())


def as_token_batch(tokens: TokenInput) -> torch.Tensor:
    """Normalise token input to a (B, T) long tensor."""
    if not isinstance(tokens, torch.Tensor):
        tokens = torch.tensor(list(tokens), dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    return tokens.long()


class BaseLm(nn.Module):
    """Decoder-only language model used as the frozen main path."""

    def __init__(self, config: BaseLmConfig):
        super().__init__()
        self.config = config
        with seeded(config.init_seed):
            self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
            self.pos_emb = (nn.Embedding(config.max_seq_len, config.d_model)
                            if config.position_encoding == "learned" else None)
            self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
            self.ln_f = nn.LayerNorm(config.d_model)
            self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
            self._init_weights()

        # Instrumentation for cache-efficiency checks
        self.forward_calls = 0
        self.positions_processed = 0

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=0.02)
        if self.config.zero_init_head:
            nn.init.zeros_(self.head.weight)

    @property
    def embedding_table(self) -> torch.Tensor:
        """Token embedding table V^l, shape (vocab_size, d_model)."""
        return self.tok_emb.weight

    def freeze(self) -> "BaseLm":
        """Disable gradients on every parameter and switch to eval mode."""
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def reset_counters(self) -> None:
        with _COUNTER_LOCK:
            self.forward_calls = 0
            self.positions_processed = 0

    def logits_from_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """Apply the output head to post-final-norm latents."""
        return self.head(latent)

    def forward_with_cache(self, tokens: TokenInput,
                           cache: Optional[KvCache] = None,
                           ) -> Tuple[torch.Tensor, KvCache]:
        """
        Process ``tokens`` after the positions already held in ``cache``.

        Returns:
            (logits of shape (B, T, vocab), cache extended by T positions)
        """
        tokens = as_token_batch(tokens)
        cache = cache or KvCache.empty()
        batch, length = tokens.shape
        if length == 0:
            raise ValueError("forward_with_cache needs at least one token")

        start = cache.length
        if start + length > self.config.max_seq_len:
            raise ContextOverflowError(
                f"{start} cached + {length} new positions exceed "
                f"max_seq_len={self.config.max_seq_len}"
            )
        if cache.batch_size is not None and cache.batch_size != batch:
            raise CacheError(f"cache batch {cache.batch_size} != token batch {batch}")

        positions = torch.arange(start, start + length)
        x = self.tok_emb(tokens)
        if self.pos_emb is not None:
            x = x + self.pos_emb(positions)[None]

        keys, values = [], []
        for index, block in enumerate(self.blocks):
            past_k, past_v = cache.layer(index)
            x, k, v = block(x, positions, past_k, past_v)
            keys.append(k)
            values.append(v)

        latents = self.ln_f(x)
        logits = self.logits_from_latent(latents)

        with _COUNTER_LOCK:
            self.forward_calls += 1
            self.positions_processed += length * batch
        return logits, cache.extended(keys, values, latents)

    def forward(self, tokens: TokenInput) -> torch.Tensor:
        logits, _ = self.forward_with_cache(tokens)
        return logits


def sample_token(logits: torch.Tensor, temperature: float,
                 generator: Optional[torch.Generator] = None) -> Union[int, torch.Tensor]:
    """
    Pick a token from ``logits`` (shape (V,) or (B, V)).

    Temperature 0 takes the argmax (lowest index on ties); otherwise samples
    from ``softmax(logits / temperature)``. A 1-D input returns an ``int``.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if not torch.isfinite(logits).all():
        raise NonFiniteError("non-finite logits passed to sample_token")

    flat = logits.reshape(-1, logits.shape[-1])
    if temperature == 0:
        choice = torch.argmax(flat, dim=-1)
    else:
        probs = torch.softmax(flat.to(torch.float64) / temperature, dim=-1)
        choice = torch.multinomial(probs, 1, generator=generator).squeeze(-1)

    if logits.dim() == 1:
        return int(choice[0])
    return choice.reshape(logits.shape[:-1])


def base_checkpoint_config(config: BaseLmConfig,
                           training: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Config sections stored with (and checked against) a main-path checkpoint."""
    sections: Dict[str, Any] = {"base": asdict(config)}
    if training is not None:
        sections["train"] = training
    return sections


def save_base_lm(model: BaseLm, path: Union[str, Path],
                 training: Optional[Dict[str, Any]] = None) -> Path:
    """Write the main path in the shared checkpoint container."""
    tensors = dict(model.state_dict())
    return save_checkpoint(path, tensors, kind=CHECKPOINT_KIND,
                           config=base_checkpoint_config(model.config, training),
                           manifest={name: ROLE_BASE for name in tensors})


def load_base_lm(path: Union[str, Path],
                 expected: Optional[Dict[str, Any]] = None) -> BaseLm:
    """
    Rebuild a ``BaseLm`` from a checkpoint written by ``save_base_lm``.

    ``expected`` (as built by ``base_checkpoint_config``) must match the stored
    config field for field, otherwise ``CheckpointError`` names the first
    difference.
    """
    checkpoint = load_checkpoint(path, expected_kind=CHECKPOINT_KIND)
    if expected is not None:
        check_config(path, checkpoint.config, expected)
    if "base" not in checkpoint.config:
        raise CheckpointError(f"Checkpoint {path} has no 'base' config section")
    model = BaseLm(BaseLmConfig(**checkpoint.config["base"]))
    dtype = torch.get_default_dtype()
    state = {k: v.to(dtype) for k, v in checkpoint.tensors.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"Checkpoint {path} does not match BaseLm: "
                              f"missing={missing}, unexpected={unexpected}")
    logger.info(f"Loaded base LM from {path}")
    return model

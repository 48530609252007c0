"""
Token generation with the diffusion path.

For every new token the main path runs once to extend its cache; the
diffusion path is then evaluated as many times as the solver asks, always
against that same cache. Each evaluation turns logits into a prediction of
the clean diffusion token (a sampled vocabulary row or the probability
weighted average), and the solver integrates the implied velocity field. The
token is finally picked from the logits at the stop time.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch

from ..core.errors import ConfigError, ContextOverflowError
from ..diffusion.path import NULL_CLASS, DiffusionPath, DiffusionVocab
from ..diffusion.schedule import DiffusionState
from ..model.base_lm import BaseLm, KvCache, sample_token
from ..utils.logger import get_logger
from .solvers import SolverSpec, integrate

logger = get_logger("generation")

GUIDANCE_FORMS = ("standard", "printed")


@dataclass
class PredictionMode:
    """
    How logits become a clean-token prediction, and how the final token is picked.

    ``base_temperature`` applies to the per-step predictions (annealed as
    ``base * (1 - t)`` when ``anneal``); ``final_temperature`` applies to the
    token emitted at the stop time.
    """

    kind: str = "sample"  # sample | expectation
    base_temperature: float = 1.0
    anneal: bool = True
    final_temperature: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sample", "expectation"):
            raise ConfigError("prediction kind must be 'sample' or 'expectation'", field="kind")
        if self.base_temperature < 0 or self.final_temperature < 0:
            raise ConfigError("temperatures must be >= 0", field="base_temperature")

    def temperature(self, t: float) -> float:
        return self.base_temperature * (1.0 - t) if self.anneal else self.base_temperature


@dataclass
class GuidanceSpec:
    """Classifier-free guidance towards ``class_id`` with strength ``w_g``."""

    class_id: int
    w_g: float = 1.0
    form: str = "standard"  # standard | printed

    def __post_init__(self):
        if self.w_g < 0:
            raise ConfigError("guidance strength must be >= 0", field="w_g")
        if self.class_id < 1:
            raise ConfigError("guidance needs a non-null class id", field="class_id")
        if self.form not in GUIDANCE_FORMS:
            raise ConfigError(f"guidance form must be one of {GUIDANCE_FORMS}", field="form")


def predict_xhat(logits: torch.Tensor, mode: PredictionMode, t: float,
                 generator: Optional[torch.Generator], vocab: DiffusionVocab,
                 ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """
    Clean-token prediction from logits (B, V).

    Returns:
        (x_hat of shape (B, d_bar), sampled token ids or None in expectation mode)
    """
    tau = mode.temperature(t)
    if mode.kind == "sample":
        ids = sample_token(logits, tau, generator)
        ids = torch.as_tensor(ids).reshape(logits.shape[:-1])
        return vocab.embed(ids), ids

    if tau == 0:
        probs = torch.zeros_like(logits)
        probs.scatter_(-1, logits.argmax(dim=-1, keepdim=True), 1.0)
    else:
        probs = torch.softmax(logits / tau, dim=-1)
    return vocab.expectation(probs), None


def guided_logits(cond: torch.Tensor, uncond: torch.Tensor, w_g: float,
                  form: str = "standard") -> torch.Tensor:
    """
    Combine conditional and unconditional logits.

    ``standard`` is ``w_g * cond + (1 - w_g) * uncond``; ``printed`` flips the
    sign of the unconditional term and only agrees with it at ``w_g = 1``.
    """
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(cond.shape)} vs {tuple(uncond.shape)}")
    if form == "printed":
        return w_g * cond - (1.0 - w_g) * uncond
    return w_g * cond + (1.0 - w_g) * uncond


def next_token_logits(base: BaseLm, cache: KvCache) -> torch.Tensor:
    """Main-path logits (B, V) for the token after the cache."""
    index = torch.tensor([cache.length - 1])
    return base.logits_from_latent(cache.latents[:, index])[:, 0]


def as_solver(solver: Union[int, SolverSpec], kind: str = "midpoint") -> SolverSpec:
    return solver if isinstance(solver, SolverSpec) else SolverSpec.from_budget(int(solver), kind)


@torch.no_grad()
def generate_token(
    path: DiffusionPath,
    cache: KvCache,
    solver: Union[int, SolverSpec],
    guidance: Optional[GuidanceSpec] = None,
    mode: Optional[PredictionMode] = None,
    generator: Optional[torch.Generator] = None,
    class_id: int = NULL_CLASS,
    trace: Optional[List[Dict[str, Any]]] = None,
) -> torch.Tensor:
    """
    Next token (shape (B,)) after the positions held in ``cache``.

    ``solver`` is a ``SolverSpec`` or a total prediction budget. Without
    guidance the path is conditioned on ``class_id``; with guidance each
    prediction evaluates the path for the guidance class and the null class.
    """
    spec = as_solver(solver)
    mode = mode or PredictionMode()
    batch = cache.batch_size
    if batch is None:
        raise ValueError("generate_token needs a non-empty cache")

    positions = torch.tensor([cache.length - 1])
    vocab = path.vocab()
    dtype = vocab.table.dtype

    def logits_at(x: torch.Tensor, t: float) -> torch.Tensor:
        state = DiffusionState(x[:, None, :], torch.full((batch, 1), t, dtype=dtype))
        if guidance is None:
            return path(state, class_id, cache, positions)[:, 0]
        cond = path(state, guidance.class_id, cache, positions)[:, 0]
        if guidance.w_g == 1.0:
            return cond
        uncond = path(state, NULL_CLASS, cache, positions)[:, 0]
        return guided_logits(cond, uncond, guidance.w_g, guidance.form)

    def predict(x: torch.Tensor, t: float) -> torch.Tensor:
        x_hat, ids = predict_xhat(logits_at(x, t), mode, t, generator, vocab)
        if trace is not None:
            trace.append({
                "type": "eval",
                "t": round(float(t), 8),
                "y": None if ids is None else ids.tolist(),
                "x_norm": round(float(x.norm()), 6),
            })
        return x_hat

    if spec.kind == "single":
        x0 = torch.zeros(batch, path.d_bar, dtype=dtype)
    else:
        x0 = torch.randn((batch, path.d_bar), generator=generator, dtype=dtype) * path.config.sigma

    result = integrate(spec, predict, x0, path.schedule)
    if trace is not None:
        for record in result.records:
            trace.append({"type": "step", "t": round(record.t, 8),
                          "step_size": round(record.step_size, 8),
                          "evals": record.evals, "accepted": record.accepted})

    token = sample_token(logits_at(result.x, result.t), mode.final_temperature, generator)
    if trace is not None:
        trace.append({"type": "token", "t": round(result.t, 8),
                      "evals": result.evals + 1, "steps": result.steps})
    return torch.as_tensor(token).reshape(batch)


def _check_room(base: BaseLm, prompt: Sequence[int], max_new_tokens: int) -> None:
    if not prompt:
        raise ValueError("prompt must hold at least one token")
    if len(prompt) + max_new_tokens > base.config.max_seq_len:
        raise ContextOverflowError(f"prompt ({len(prompt)}) + {max_new_tokens} new tokens "
                                   f"exceed max_seq_len={base.config.max_seq_len}")


@torch.no_grad()
def generate_sequence(
    base: BaseLm,
    path: DiffusionPath,
    prompt: Sequence[int],
    max_new_tokens: int,
    solver: Union[int, SolverSpec] = 15,
    guidance: Optional[GuidanceSpec] = None,
    mode: Optional[PredictionMode] = None,
    generator: Optional[torch.Generator] = None,
    class_id: int = NULL_CLASS,
    eos_id: Optional[int] = None,
    recompute: bool = False,
    trace: Optional[List[Dict[str, Any]]] = None,
) -> List[int]:
    """
    Generate up to ``max_new_tokens`` after ``prompt`` (stops after EOS).

    The main path runs once over the prompt and once per emitted token.
    With ``recompute`` the cache is instead rebuilt from the full context
    before every token.
    """
    _check_room(base, prompt, max_new_tokens)
    spec = as_solver(solver)
    context = list(prompt)
    _, cache = base.forward_with_cache(context)
    generated: List[int] = []

    for index in range(max_new_tokens):
        if recompute and generated:
            _, cache = base.forward_with_cache(context)
        token_trace: Optional[List[Dict[str, Any]]] = [] if trace is not None else None
        token = int(generate_token(path, cache, spec, guidance, mode, generator,
                                   class_id, token_trace)[0])
        if trace is not None:
            trace.extend(dict(record, token_index=index) for record in token_trace)

        generated.append(token)
        context.append(token)
        if not recompute:
            _, cache = base.forward_with_cache([token], cache)
        if eos_id is not None and token == eos_id:
            break
    return generated


@torch.no_grad()
def base_generate(base: BaseLm, prompt: Sequence[int], max_new_tokens: int,
                  temperature: float = 0.0, generator: Optional[torch.Generator] = None,
                  eos_id: Optional[int] = None) -> List[int]:
    """Ancestral sampling from the main path alone."""
    _check_room(base, prompt, max_new_tokens)
    _, cache = base.forward_with_cache(list(prompt))
    generated: List[int] = []
    for _ in range(max_new_tokens):
        token = int(sample_token(next_token_logits(base, cache)[0], temperature, generator))
        generated.append(token)
        _, cache = base.forward_with_cache([token], cache)
        if eos_id is not None and token == eos_id:
            break
    return generated


def write_trace(records: Sequence[Dict[str, Any]], file: Union[str, Path]) -> Path:
    """Append trace records as JSON lines."""
    file = Path(file)
    file.parent.mkdir(parents=True, exist_ok=True)
    with open(file, "a", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return file

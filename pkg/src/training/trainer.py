"""
Training loops: main-path pretraining, diffusion-path training and the
plain-LoRA baseline arm.

All three share one loop (``fit``): AdamW, a linear warmup to the peak rate
followed by a linear decay to the floor, optional global-norm clipping,
periodic validation rows appended to a metrics CSV and periodic checkpoints.
A non-finite training loss aborts with ``DivergenceError`` pointing at the
last checkpoint that was written.
"""

import copy
import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from ..core.checkpoint import ROLE_BASE, check_config, load_checkpoint, save_checkpoint
from ..core.errors import CheckpointError, ConfigError, DivergenceError, NonFiniteError
from ..core.numerics import Precision, as_precision, backward, make_generator, seeded
from ..diffusion.path import NULL_CLASS, DiffusionPath, save_path
from ..diffusion.schedule import TIMESTEP_KINDS, corrupt, sample_timesteps
from ..harness.tasks import Example
from ..model.base_lm import BaseLm, BaseLmConfig, save_base_lm
from ..model.lora import freeze_all_but_lora, inject_lora, manifest_role
from ..utils.logger import get_logger

logger = get_logger("training")

METRIC_COLUMNS = ("step", "lr", "train_loss", "val_loss_at_t0", "val_loss_at_t1", "wallclock_s")
LOSS_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
BASELINE_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "fc_in", "fc_out")
BASELINE_KIND = "baseline_lora"
PRECISIONS = tuple(p.value for p in Precision)
# Changing these does not change the weights a run produces
CADENCE_FIELDS = ("eval_every", "checkpoint_every", "n_val_examples")


@dataclass
class TrainConfig:
    """Optimiser, schedule and data settings shared by every training arm."""

    lr_peak: float = 1e-4
    lr_floor: float = 1e-6
    warmup_steps: int = 100
    steps: int = 1000
    epochs: Optional[int] = None
    batch_size: int = 32
    max_seq_len: int = 256
    weight_decay: float = 0.01
    grad_clip: Optional[float] = 1.0
    timestep_sampling: str = "uniform"  # uniform | cosmap
    class_dropout: float = 0.1
    lora_rank: int = 16
    lora_alpha: float = 32.0
    loss_on: str = "all"  # all | answer
    precision: Optional[str] = None  # None keeps the process default
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 500
    n_val_examples: int = 256

    def __post_init__(self):
        if not self.lr_peak >= self.lr_floor > 0:
            raise ConfigError("need lr_peak >= lr_floor > 0", field="lr_peak")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("steps and warmup_steps must be >= 0", field="steps")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be >= 0", field="epochs")
        if self.epochs is None and self.steps > 0 and self.warmup_steps >= self.steps:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) must be below "
                              f"steps ({self.steps})", field="warmup_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive", field="batch_size")
        if self.timestep_sampling not in TIMESTEP_KINDS:
            raise ConfigError(f"timestep_sampling must be one of {TIMESTEP_KINDS}",
                              field="timestep_sampling")
        if not 0.0 <= self.class_dropout <= 1.0:
            raise ConfigError("class_dropout must lie in [0, 1]", field="class_dropout")
        if self.loss_on not in ("all", "answer"):
            raise ConfigError("loss_on must be 'all' or 'answer'", field="loss_on")
        if self.precision is not None and self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS} or null",
                              field="precision")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null", field="grad_clip")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("eval_every and checkpoint_every must be positive",
                              field="eval_every")

    @property
    def dtype(self) -> torch.dtype:
        """Parameter dtype the run trains in."""
        if self.precision is None:
            return torch.get_default_dtype()
        return as_precision(self.precision).dtype

    def fingerprint(self) -> Dict[str, Any]:
        """Fields that shape the trained weights (logging cadence excluded)."""
        values = asdict(self)
        for name in CADENCE_FIELDS:
            values.pop(name)
        return values

    def total_steps(self, n_train: int) -> int:
        """Optimiser steps implied by ``epochs`` (if set) or ``steps``."""
        if self.epochs is None:
            return self.steps
        total = self.epochs * math.ceil(n_train / self.batch_size)
        if total > 0 and self.warmup_steps >= total:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) must be below the "
                              f"{total} steps implied by epochs", field="warmup_steps")
        return total


def lr_at(step: int, config: TrainConfig, total_steps: int) -> float:
    """
    Learning rate used by optimiser step ``step`` (0-based).

    Ramps as ``peak * (step + 1) / warmup`` and reaches the peak at
    ``step == warmup``; then decays linearly to the floor at the final step.
    """
    peak, floor, warmup = config.lr_peak, config.lr_floor, config.warmup_steps
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - 1 - warmup)
    frac = min(1.0, (step - warmup) / span)
    return peak + (floor - peak) * frac


@dataclass
class Batch:
    """
    Padded sequences plus the per-position draws of one training step.

    Position k of ``targets``/``target_mask``/``timesteps``/``noise`` is the
    prediction of token k + 1 from the latent at position k.
    """

    tokens: torch.Tensor       # (B, L)
    target_mask: torch.Tensor  # (B, L - 1) bool
    class_ids: torch.Tensor    # (B,)
    timesteps: Optional[torch.Tensor] = None  # (B, L - 1)
    noise: Optional[torch.Tensor] = None      # (B, L - 1, d_bar), already scaled by sigma

    @property
    def targets(self) -> torch.Tensor:
        return self.tokens[:, 1:]

    @property
    def positions(self) -> torch.Tensor:
        return torch.arange(self.tokens.shape[1] - 1)


def make_batch(examples: Sequence[Example], pad_id: int, loss_on: str = "all",
               max_seq_len: Optional[int] = None) -> Batch:
    """Pad ``examples`` into a batch; the mask selects every (or only answer) target."""
    if not examples:
        raise ValueError("cannot build a batch from zero examples")
    length = max(len(ex.tokens) for ex in examples)
    if max_seq_len is not None and length > max_seq_len:
        raise ConfigError(f"example length {length} exceeds max_seq_len {max_seq_len}",
                          field="max_seq_len")

    tokens = torch.full((len(examples), length), pad_id, dtype=torch.long)
    mask = torch.zeros((len(examples), length - 1), dtype=torch.bool)
    for row, ex in enumerate(examples):
        seq = ex.tokens
        tokens[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        first_target = len(ex.prompt) if loss_on == "answer" else 1
        # target k + 1 lives at mask index k
        mask[row, first_target - 1:len(seq) - 1] = True
    class_ids = torch.tensor([ex.class_id for ex in examples], dtype=torch.long)
    return Batch(tokens, mask, class_ids)


def draw_diffusion(batch: Batch, d_bar: int, sigma: float, generator: torch.Generator,
                   timestep_sampling: str = "uniform", class_dropout: float = 0.0,
                   dtype: Optional[torch.dtype] = None) -> Batch:
    """Attach independent per-position timesteps and noise; drop class labels."""
    dtype = dtype or torch.get_default_dtype()
    shape = batch.target_mask.shape
    count = shape[0] * shape[1]
    timesteps = sample_timesteps(count, timestep_sampling, generator, dtype).reshape(shape)
    noise = torch.randn((*shape, d_bar), generator=generator, dtype=dtype) * sigma

    class_ids = batch.class_ids
    if class_dropout > 0:
        dropped = torch.rand(class_ids.shape, generator=generator) < class_dropout
        class_ids = torch.where(dropped, torch.full_like(class_ids, NULL_CLASS), class_ids)
    return replace(batch, class_ids=class_ids, timesteps=timesteps, noise=noise)


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    weights = mask.to(values.dtype)
    return (values * weights).sum() / weights.sum().clamp_min(1.0)


def lm_loss(model: BaseLm, batch: Batch) -> torch.Tensor:
    """Plain next-token cross-entropy over the batch's target positions."""
    logits, _ = model.forward_with_cache(batch.tokens)
    logits = logits[:, :-1]
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                         batch.targets.reshape(-1), reduction="none")
    return masked_mean(ce.reshape(batch.targets.shape), batch.target_mask)


def l2d_loss(batch: Batch, base: BaseLm, path: DiffusionPath) -> torch.Tensor:
    """
    Cross-entropy of the diffusion path's logits given corrupted target
    embeddings, averaged over every target position in the batch.
    """
    if batch.timesteps is None or batch.noise is None:
        raise ValueError("batch has no diffusion draws; call draw_diffusion first")
    with torch.no_grad():
        _, cache = base.forward_with_cache(batch.tokens)

    vocab = path.vocab()
    state = corrupt(vocab.embed(batch.targets), batch.timesteps, path.schedule,
                    noise=batch.noise)
    logits = path(state, batch.class_ids, cache, batch.positions)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                         batch.targets.reshape(-1), reduction="none")
    loss = masked_mean(ce.reshape(batch.targets.shape), batch.target_mask)
    if not torch.isfinite(loss):
        raise NonFiniteError("non-finite diffusion loss")
    return loss


def iterate_batches(examples: Sequence[Example], batch_size: int,
                    generator: torch.Generator):
    """Endless shuffled minibatches (reshuffled every epoch)."""
    while True:
        order = torch.randperm(len(examples), generator=generator).tolist()
        for start in range(0, len(order), batch_size):
            yield [examples[i] for i in order[start:start + batch_size]]


@dataclass
class TrainResult:
    """Outputs of a training run."""

    checkpoint: Optional[Path]
    metrics_path: Optional[Path]
    steps: int
    final_train_loss: float = float("nan")
    history: List[Dict[str, float]] = field(default_factory=list)


class MetricsLog:
    """Append-only CSV metrics file."""

    def __init__(self, path: Optional[Path]):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not path.exists():
                with open(path, "w", newline="", encoding="utf-8") as f:
                    csv.writer(f, lineterminator="\n").writerow(METRIC_COLUMNS)

    def append(self, row: Dict[str, float]) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(
                ["" if row.get(col) is None else row[col] for col in METRIC_COLUMNS])


def fit(
    params: Sequence[nn.Parameter],
    config: TrainConfig,
    train_examples: Sequence[Example],
    compute_loss: Callable[[List[Example], torch.Generator], torch.Tensor],
    evaluate: Callable[[], Dict[str, float]],
    save: Callable[[Path], Path],
    out_dir: Optional[Path],
    label: str,
) -> TrainResult:
    """Run the shared optimisation loop."""
    params = list(params)
    total = config.total_steps(len(train_examples))
    checkpoint_dir = out_dir / "checkpoints" if out_dir is not None else None
    metrics = MetricsLog(out_dir / f"{label}_metrics.csv" if out_dir is not None else None)
    result = TrainResult(checkpoint=None, metrics_path=metrics.path, steps=total)
    if total == 0:
        return result
    if not params:
        raise ConfigError(f"{label}: nothing to train")

    generator = make_generator(config.seed)
    optimizer = AdamW(params, lr=config.lr_peak, weight_decay=config.weight_decay)
    scheduler = LambdaLR(optimizer, lambda s: lr_at(s, config, total) / config.lr_peak)
    batches = iterate_batches(train_examples, config.batch_size, generator)

    started = time.perf_counter()
    last_good: Optional[Path] = None
    running: List[float] = []

    for step in range(total):
        lr = optimizer.param_groups[0]["lr"]
        try:
            loss = compute_loss(next(batches), generator)
        except NonFiniteError:
            loss = torch.tensor(float("nan"))
        if not torch.isfinite(loss):
            raise DivergenceError(f"{label}: non-finite loss at step {step}", step=step,
                                  last_good_checkpoint=str(last_good) if last_good else None)

        optimizer.zero_grad(set_to_none=True)
        backward(loss)
        if config.grad_clip is not None:
            norm = float(nn.utils.clip_grad_norm_(params, config.grad_clip))
            if norm > config.grad_clip:
                logger.debug(f"{label}: clipped gradient norm {norm:.3f}",
                             extra={"step": step})
        optimizer.step()
        scheduler.step()
        running.append(loss.item())

        last_step = step == total - 1
        if (step + 1) % config.eval_every == 0 or last_step:
            row = {"step": step + 1, "lr": lr, "train_loss": sum(running) / len(running)}
            row.update(evaluate())
            row["wallclock_s"] = round(time.perf_counter() - started, 3)
            metrics.append(row)
            result.history.append(row)
            logger.info(f"{label} step {step + 1}/{total}: train {row['train_loss']:.4f}, "
                        f"val@t0 {row.get('val_loss_at_t0', float('nan')):.4f}",
                        extra={"step": step + 1, "loss": row["train_loss"], "lr": lr})
            result.final_train_loss = row["train_loss"]
            running = []

        if checkpoint_dir is not None and ((step + 1) % config.checkpoint_every == 0 or last_step):
            last_good = save(checkpoint_dir / f"{label}_step{step + 1}.safetensors")

    result.checkpoint = last_good
    return result


def _val_batches(examples: Sequence[Example], config: TrainConfig, pad_id: int):
    examples = list(examples)[:config.n_val_examples]
    for start in range(0, len(examples), config.batch_size):
        yield make_batch(examples[start:start + config.batch_size], pad_id,
                         config.loss_on, config.max_seq_len)


@torch.no_grad()
def evaluate_lm_loss(model: BaseLm, examples: Sequence[Example], config: TrainConfig,
                     pad_id: int) -> float:
    """Mean next-token cross-entropy over (a prefix of) ``examples``."""
    total, count = 0.0, 0
    for batch in _val_batches(examples, config, pad_id):
        n = int(batch.target_mask.sum())
        total += lm_loss(model, batch).item() * n
        count += n
    return total / max(count, 1)


@torch.no_grad()
def evaluate_loss_grid(base: BaseLm, path: DiffusionPath, examples: Sequence[Example],
                       config: TrainConfig, pad_id: int,
                       grid: Sequence[float] = LOSS_GRID, seed: int = 12345) -> Dict[float, float]:
    """
    Diffusion loss at fixed timesteps on (a prefix of) ``examples``.

    Noise is drawn from a generator seeded with ``seed`` so the grid is
    comparable across checkpoints.
    """
    dtype = path.vocab_proj.weight.dtype
    results = {}
    for t in grid:
        generator = make_generator(seed)
        total, count = 0.0, 0
        for batch in _val_batches(examples, config, pad_id):
            batch = draw_diffusion(batch, path.d_bar, path.config.sigma, generator, dtype=dtype)
            batch = replace(batch, timesteps=torch.full_like(batch.timesteps, t))
            n = int(batch.target_mask.sum())
            total += l2d_loss(batch, base, path).item() * n
            count += n
        results[float(t)] = total / max(count, 1)
    return results


def pretrain(config: TrainConfig, model_config: BaseLmConfig,
             train_examples: Sequence[Example], val_examples: Sequence[Example],
             pad_id: int, out_dir: Optional[Union[str, Path]] = None,
             ) -> Tuple[BaseLm, TrainResult]:
    """Train a fresh main path with next-token cross-entropy."""
    out_dir = Path(out_dir) if out_dir is not None else None
    model = BaseLm(model_config).to(config.dtype)
    model.train()
    fingerprint = config.fingerprint()

    def compute_loss(examples: List[Example], generator: torch.Generator) -> torch.Tensor:
        return lm_loss(model, make_batch(examples, pad_id, config.loss_on, config.max_seq_len))

    def evaluate() -> Dict[str, float]:
        model.eval()
        loss = evaluate_lm_loss(model, val_examples, config, pad_id)
        model.train()
        return {"val_loss_at_t0": loss}

    initial = evaluate_lm_loss(model, val_examples, config, pad_id) if val_examples else None
    result = fit(model.parameters(), config, train_examples, compute_loss, evaluate,
                 lambda p: save_base_lm(model, p, fingerprint), out_dir, "pretrain")
    model.eval()

    if out_dir is not None:
        result.checkpoint = save_base_lm(model, out_dir / "base_lm.safetensors", fingerprint)
    if initial is not None and result.history:
        final = result.history[-1]["val_loss_at_t0"]
        if final < initial:
            logger.info(f"pretrain: validation CE {initial:.4f} -> {final:.4f}")
        else:
            logger.warning(f"pretrain: validation CE did not drop ({initial:.4f} -> "
                           f"{final:.4f}); the main path is no better than its init")
    return model, result


def train(config: TrainConfig, base: BaseLm, path: DiffusionPath,
          train_examples: Sequence[Example], val_examples: Sequence[Example],
          pad_id: int, out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Train the diffusion path on top of a frozen main path.

    The path trains in ``config.precision`` when set; the main path must already
    hold that dtype because the path reads its cache.
    """
    if not base.is_frozen:
        raise ValueError("the main path must be frozen before diffusion training")
    base_dtype = base.embedding_table.dtype
    if config.precision is not None and config.dtype != base_dtype:
        raise ConfigError(f"precision {config.precision} differs from the main path's "
                          f"{base_dtype}", field="precision")
    out_dir = Path(out_dir) if out_dir is not None else None
    path.to(base_dtype)
    dtype = path.vocab_proj.weight.dtype
    fingerprint = config.fingerprint()
    path.train()

    def compute_loss(examples: List[Example], generator: torch.Generator) -> torch.Tensor:
        batch = make_batch(examples, pad_id, config.loss_on, config.max_seq_len)
        batch = draw_diffusion(batch, path.d_bar, path.config.sigma, generator,
                               config.timestep_sampling, config.class_dropout, dtype)
        return l2d_loss(batch, base, path)

    def evaluate() -> Dict[str, float]:
        if not val_examples:
            return {}
        path.eval()
        grid = evaluate_loss_grid(base, path, val_examples, config, pad_id, grid=(0.0, 1.0))
        path.train()
        return {"val_loss_at_t0": grid[0.0], "val_loss_at_t1": grid[1.0]}

    result = fit(path.trainable_parameters(), config, train_examples, compute_loss, evaluate,
                 lambda p: save_path(path, p, fingerprint), out_dir, "l2d")
    path.eval()
    if out_dir is not None:
        result.checkpoint = save_path(path, out_dir / "diffusion_path.safetensors", fingerprint)
    return result


def build_baseline(base: BaseLm, rank: int, alpha: float, seed: int = 0) -> BaseLm:
    """Copy of ``base`` with LoRA adapters on every attention and MLP projection."""
    model = copy.deepcopy(base)
    with seeded(seed):
        inject_lora(model, BASELINE_TARGETS, rank, alpha)
    freeze_all_but_lora(model)
    model.reset_counters()
    return model


def baseline_checkpoint_config(base_config: BaseLmConfig, config: TrainConfig) -> Dict[str, Any]:
    """Config stored with a baseline checkpoint and compared on resume."""
    return {"base": asdict(base_config), "lora_rank": config.lora_rank,
            "lora_alpha": config.lora_alpha, "train": config.fingerprint()}


def save_baseline(model: BaseLm, file: Union[str, Path], config: TrainConfig) -> Path:
    tensors = dict(model.state_dict())
    manifest = {name: manifest_role(name, ROLE_BASE) for name in tensors}
    return save_checkpoint(file, tensors, kind=BASELINE_KIND,
                           config=baseline_checkpoint_config(model.config, config),
                           manifest=manifest)


def load_baseline(file: Union[str, Path], expected: Optional[Dict[str, Any]] = None) -> BaseLm:
    """Load a baseline; ``expected`` must agree with the stored config when given."""
    checkpoint = load_checkpoint(file, expected_kind=BASELINE_KIND)
    cfg = checkpoint.config
    if expected is not None:
        check_config(file, cfg, expected)
    model = build_baseline(BaseLm(BaseLmConfig(**cfg["base"])), cfg["lora_rank"],
                           cfg["lora_alpha"])
    dtype = torch.get_default_dtype()
    missing, unexpected = model.load_state_dict(
        {k: v.to(dtype) for k, v in checkpoint.tensors.items()}, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{file} does not match the baseline config: "
                              f"missing={missing}, unexpected={unexpected}")
    model.eval()
    return model


def baseline_lora_finetune(config: TrainConfig, base: BaseLm,
                           train_examples: Sequence[Example], val_examples: Sequence[Example],
                           pad_id: int, out_dir: Optional[Union[str, Path]] = None,
                           ) -> Tuple[BaseLm, TrainResult]:
    """Finetune LoRA adapters on the main path with next-token cross-entropy."""
    out_dir = Path(out_dir) if out_dir is not None else None
    model = build_baseline(base, config.lora_rank, config.lora_alpha, config.seed)
    if config.precision is not None:
        model.to(config.dtype)
    model.train()

    def compute_loss(examples: List[Example], generator: torch.Generator) -> torch.Tensor:
        return lm_loss(model, make_batch(examples, pad_id, config.loss_on, config.max_seq_len))

    def evaluate() -> Dict[str, float]:
        if not val_examples:
            return {}
        model.eval()
        loss = evaluate_lm_loss(model, val_examples, config, pad_id)
        model.train()
        return {"val_loss_at_t0": loss}

    def save(file: Path) -> Path:
        return save_baseline(model, file, config)

    trainable = [p for p in model.parameters() if p.requires_grad]
    result = fit(trainable, config, train_examples, compute_loss, evaluate, save,
                 out_dir, "baseline")
    model.eval()
    if out_dir is not None:
        result.checkpoint = save(out_dir / "baseline_lora.safetensors")
    return model, result

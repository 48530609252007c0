"""
Exact-match evaluation of generation arms on task splits.
"""

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from ..core.errors import CheckpointError
from ..core.numerics import make_generator
from ..diffusion.path import NULL_CLASS, DiffusionPath
from ..inference.generation import (GuidanceSpec, PredictionMode, base_generate,
                                    generate_sequence, write_trace)
from ..inference.solvers import SolverSpec
from ..model.base_lm import BaseLm
from ..utils.logger import get_logger
from .tasks import Example, Task, exact_match

logger = get_logger("evaluation")

REPORT_COLUMNS = ("task", "arm", "solver", "budget", "w_g", "seed", "n_examples",
                  "accuracy", "mean_evals", "mean_steps")


@dataclass
class EvalRow:
    task: str
    arm: str
    solver: str
    budget: int
    w_g: Optional[float]
    seed: int
    n_examples: int
    accuracy: float
    mean_evals: float
    mean_steps: float
    wallclock_s: float = 0.0


@dataclass
class EvalReport:
    """Accuracy rows, one per (arm, budget, guidance strength, seed)."""

    task: str
    seeds: List[int]
    rows: List[EvalRow] = field(default_factory=list)

    def mean_accuracy(self, arm: str, budget: Optional[int] = None,
                      w_g: Optional[float] = None) -> float:
        values = [r.accuracy for r in self.rows if r.arm == arm
                  and (budget is None or r.budget == budget)
                  and (w_g is None or r.w_g == w_g)]
        return float(np.mean(values)) if values else float("nan")

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def to_csv(self, file: Union[str, Path], include_timing: bool = False) -> Path:
        """Write rows as LF-terminated CSV; timing is left out unless asked for."""
        file = Path(file)
        file.parent.mkdir(parents=True, exist_ok=True)
        columns = REPORT_COLUMNS + (("wallclock_s",) if include_timing else ())
        with open(file, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in self.rows:
                values = asdict(row)
                writer.writerow([_fmt(values[c]) for c in columns])
        return file


def _fmt(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def _select(task: Task, split: str, max_examples: Optional[int]) -> List[Example]:
    examples = task.split(split)
    return examples[:max_examples] if max_examples is not None else examples


def _score(generated: List[List[int]], examples: Sequence[Example], eos_id: int) -> float:
    hits = sum(exact_match(gen, ex.answer, eos_id) for gen, ex in zip(generated, examples))
    return hits / max(len(examples), 1)


@torch.no_grad()
def evaluate_lm_arm(model: BaseLm, task: Task, arm: str, seeds: Sequence[int],
                    temperature: float = 0.0, split: str = "test",
                    max_examples: Optional[int] = None) -> EvalReport:
    """Accuracy of plain autoregressive decoding from ``model``."""
    examples = _select(task, split, max_examples)
    eos = task.tokenizer.eos_id
    report = EvalReport(task.kind.value, list(seeds))
    for seed in seeds:
        generator = make_generator(seed)
        started = time.perf_counter()
        generated = [base_generate(model, ex.prompt, len(ex.answer), temperature,
                                   generator, eos) for ex in examples]
        report.rows.append(EvalRow(task.kind.value, arm, "none", 1, None, seed,
                                   len(examples), _score(generated, examples, eos),
                                   1.0, 0.0, time.perf_counter() - started))
    return report


@torch.no_grad()
def evaluate(
    base: BaseLm,
    path: Optional[DiffusionPath],
    task: Task,
    budgets: Sequence[int] = (1, 15),
    seeds: Sequence[int] = (0,),
    guidance_grid: Sequence[Optional[float]] = (None,),
    solver_kind: str = "midpoint",
    adaptive: Optional[SolverSpec] = None,
    mode: Optional[PredictionMode] = None,
    split: str = "test",
    max_examples: Optional[int] = None,
    baseline: Optional[BaseLm] = None,
    include_base: bool = True,
    trace_dir: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """
    Exact-match accuracy for the base arm, the optional LoRA baseline and
    every (budget, guidance strength) configuration of the diffusion path.

    ``adaptive`` adds one row per seed for an adaptive solver, whose
    per-token evaluation and step counts are reported.
    """
    mode = mode or PredictionMode()
    if path is not None and path.base_config.vocab_size != task.tokenizer.vocab_size:
        raise CheckpointError(f"diffusion path vocabulary ({path.base_config.vocab_size}) "
                              f"does not match the task's ({task.tokenizer.vocab_size})")
    if base.config.vocab_size != task.tokenizer.vocab_size:
        raise CheckpointError(f"main path vocabulary ({base.config.vocab_size}) does not "
                              f"match the task's ({task.tokenizer.vocab_size})")

    report = EvalReport(task.kind.value, list(seeds))
    if include_base:
        report.extend(evaluate_lm_arm(base, task, "base", seeds, mode.final_temperature,
                                      split, max_examples))
    if baseline is not None:
        report.extend(evaluate_lm_arm(baseline, task, "baseline_lora", seeds,
                                      mode.final_temperature, split, max_examples))
    if path is None:
        return report

    configs = [(SolverSpec.from_budget(b, solver_kind), b) for b in budgets]
    if adaptive is not None:
        configs.append((adaptive, 0))

    examples = _select(task, split, max_examples)
    eos = task.tokenizer.eos_id
    for spec, budget in configs:
        for w_g in guidance_grid:
            guidance = GuidanceSpec(task.class_id, w_g) if w_g is not None else None
            for seed in seeds:
                report.rows.append(_run_l2d(base, path, task, examples, spec, budget,
                                            guidance, mode, seed, eos, trace_dir))
    return report


def _run_l2d(base: BaseLm, path: DiffusionPath, task: Task, examples: Sequence[Example],
             spec: SolverSpec, budget: int, guidance: Optional[GuidanceSpec],
             mode: PredictionMode, seed: int, eos: int,
             trace_dir: Optional[Union[str, Path]]) -> EvalRow:
    generator = make_generator(seed)
    class_id = task.class_id if guidance is None else NULL_CLASS
    trace: List[Dict[str, Any]] = []
    started = time.perf_counter()

    generated = []
    for index, ex in enumerate(examples):
        example_trace: List[Dict[str, Any]] = []
        generated.append(generate_sequence(base, path, ex.prompt, len(ex.answer), spec,
                                           guidance, mode, generator, class_id, eos,
                                           trace=example_trace))
        trace.extend(dict(record, example=index) for record in example_trace)
    elapsed = time.perf_counter() - started

    tokens = [r for r in trace if r["type"] == "token"]
    mean_evals = float(np.mean([r["evals"] for r in tokens])) if tokens else 0.0
    mean_steps = float(np.mean([r["steps"] for r in tokens])) if tokens else 0.0
    w_g = guidance.w_g if guidance is not None else None

    if trace_dir is not None:
        name = f"{task.kind.value}_{spec.kind}_b{budget}_w{w_g}_s{seed}.jsonl"
        trace_file = Path(trace_dir) / name
        trace_file.unlink(missing_ok=True)
        write_trace(trace, trace_file)

    accuracy = _score(generated, examples, eos)
    logger.info(f"{task.kind.value} {spec.kind}/{budget} w_g={w_g} seed={seed}: "
                f"accuracy {accuracy:.3f}, {mean_evals:.1f} evals/token",
                extra={"task": task.kind.value, "seed": seed, "budget": budget})
    return EvalRow(task.kind.value, "l2d", spec.kind, budget, w_g, seed, len(examples),
                   accuracy, mean_evals, mean_steps, elapsed)

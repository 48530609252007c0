"""
End-to-end experiment driver.

An experiment pretrains (or reloads) one main path, trains one diffusion path
per (arm, seed) plus the optional LoRA baseline, evaluates every arm on every
task and writes a summary table. Everything lands under
``<artifact_root>/<name>/``:

    config.json              full configuration echo
    base/                    main-path checkpoint and pretraining metrics
    runs/<arm>_seed<s>/      per-run checkpoints, metrics and traces
    summary.csv              one row per (task, arm, solver, budget, w_g, seed)
    timing.csv               the same rows with wallclock seconds
    loss_grid.csv            diffusion loss at fixed timesteps per run
    step_sweep.csv           accuracy pivoted to one column per budget

Stages whose final checkpoint already exists are loaded instead of retrained,
once every such checkpoint has been checked against the current config.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import torch

from ..core.checkpoint import check_config, read_config
from ..core.config import ConfigManager, from_dict, get_settings
from ..core.errors import ConfigError, L2DError
from ..core.numerics import set_precision
from ..diffusion.path import CHECKPOINT_KIND as PATH_KIND
from ..diffusion.path import (DiffusionConfig, DiffusionPath, init_from_main, load_path,
                              path_checkpoint_config)
from ..inference.generation import PredictionMode
from ..inference.solvers import ERROR_ESTIMATE_KINDS, FIXED_KINDS, SolverSpec
from ..model.base_lm import CHECKPOINT_KIND as BASE_KIND
from ..model.base_lm import BaseLm, BaseLmConfig, base_checkpoint_config, load_base_lm
from ..training.trainer import (BASELINE_KIND, PRECISIONS, TrainConfig,
                                baseline_checkpoint_config, baseline_lora_finetune,
                                evaluate_loss_grid, load_baseline, pretrain, train)
from ..utils.logger import RunLoggerAdapter, get_logger, setup_logger
from ..utils.parallel_processor import RunTask, run_parallel
from .evaluation import EvalReport, EvalRow, evaluate, evaluate_lm_arm
from .tasks import CharTokenizer, Example, Task, TaskKind, TaskSizes, load_tasks

logger = get_logger("experiments")

SWEEP_KINDS = ("none", "steps", "guidance", "sigma", "init", "solvers")
STEP_SWEEP_BUDGETS = [1, 2, 4, 8, 15, 31]
BASE_CHECKPOINT = "base_lm.safetensors"
PATH_CHECKPOINT = "diffusion_path.safetensors"
BASELINE_CHECKPOINT = "baseline_lora.safetensors"


@dataclass
class EvalConfig:
    """Which generation configurations each arm is scored under."""

    budgets: List[int] = field(default_factory=lambda: list(STEP_SWEEP_BUDGETS))
    solver_kind: str = "midpoint"
    guidance: List[Optional[float]] = field(default_factory=lambda: [None])
    adaptive: bool = False
    abs_tol: float = 3e-4
    rel_tol: float = 3e-4
    error_estimate: str = "step_doubling"  # step_doubling | embedded
    split: str = "test"
    max_examples: Optional[int] = 100
    mode: PredictionMode = field(default_factory=PredictionMode)
    write_traces: bool = True

    def __post_init__(self):
        if not self.budgets or min(self.budgets) < 1:
            raise ConfigError("budgets must be a non-empty list of values >= 1",
                              field="eval.budgets")
        if self.solver_kind not in FIXED_KINDS:
            raise ConfigError(f"solver_kind must be one of {FIXED_KINDS}",
                              field="eval.solver_kind")
        if self.error_estimate not in ERROR_ESTIMATE_KINDS:
            raise ConfigError(f"error_estimate must be one of {ERROR_ESTIMATE_KINDS}",
                              field="eval.error_estimate")
        if self.split not in ("train", "val", "test"):
            raise ConfigError("split must be train, val or test", field="eval.split")
        if not self.guidance:
            raise ConfigError("guidance needs at least one entry (null = unguided)",
                              field="eval.guidance")

    def adaptive_spec(self) -> SolverSpec:
        return SolverSpec(kind="adaptive_rk2", abs_tol=self.abs_tol, rel_tol=self.rel_tol,
                          error_estimate=self.error_estimate)


@dataclass
class SweepConfig:
    """Which ablation the experiment runs."""

    kind: str = "none"
    sigmas: List[float] = field(default_factory=lambda: [32.0, 64.0, 128.0])
    init_modes: List[str] = field(default_factory=lambda: ["lora", "full", "scratch"])
    guidance_strengths: List[float] = field(default_factory=lambda: [0.0, 1.0, 1.5, 2.0, 3.0])
    solver_budgets: Dict[str, int] = field(
        default_factory=lambda: {"euler": 15, "midpoint": 15, "rk4": 17})

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}", field="sweep.kind")
        unknown = set(self.solver_budgets) - set(FIXED_KINDS)
        if unknown:
            raise ConfigError(f"unknown solver kinds {sorted(unknown)}",
                              field="sweep.solver_budgets")


@dataclass
class ExperimentConfig:
    """A complete, reproducible experiment. ``name`` and ``tasks`` are required."""

    name: str
    tasks: List[str]
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data_seed: int = 0
    sizes: TaskSizes = field(default_factory=TaskSizes)
    base: BaseLmConfig = field(default_factory=BaseLmConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr_peak=1e-3, steps=2000))
    l2d: TrainConfig = field(default_factory=TrainConfig)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    run_baseline: bool = True
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    precision: Optional[str] = None  # None falls back to L2D_PRECISION
    workers: Optional[int] = None

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise ConfigError("name must be a non-empty directory name", field="name")
        if not self.tasks:
            raise ConfigError("tasks must list at least one task kind", field="tasks")
        for kind in self.tasks:
            if kind not in [k.value for k in TaskKind]:
                raise ConfigError(f"unknown task kind {kind!r}", field="tasks")
        if not self.seeds:
            raise ConfigError("seeds must not be empty", field="seeds")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1", field="workers")
        if self.precision is not None and self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS} or null",
                              field="precision")


def load_experiment_config(source: Union[str, Path, Dict[str, Any]]) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from a JSON file or an already-parsed mapping."""
    data = source if isinstance(source, dict) else ConfigManager.read_json(source)
    return from_dict(ExperimentConfig, data)


@dataclass
class TaskData:
    """The tasks of an experiment, sharing one tokenizer."""

    tokenizer: CharTokenizer
    tasks: List[Task]

    @property
    def train(self) -> List[Example]:
        return [ex for task in self.tasks for ex in task.train]

    @property
    def val(self) -> List[Example]:
        return [ex for task in self.tasks for ex in task.val]

    @property
    def max_len(self) -> int:
        return max(task.max_len for task in self.tasks)


@dataclass
class Arm:
    """One diffusion-path variant and the generation configurations it is scored under."""

    name: str
    diffusion: DiffusionConfig
    solver_budgets: List[Any]  # (kind, [budgets]) pairs
    guidance: List[Optional[float]]
    adaptive: bool


def prepare_data(config: ExperimentConfig) -> TaskData:
    tokenizer = CharTokenizer()
    tasks = load_tasks(config.tasks, config.sizes, config.data_seed, tokenizer)
    for task in tasks:
        logger.info(f"{task.kind.value}: {len(task.train)} train / {len(task.val)} val / "
                    f"{len(task.test)} test examples")
    return TaskData(tokenizer, tasks)


def base_model_config(config: ExperimentConfig, data: TaskData) -> BaseLmConfig:
    """The configured main path with its vocabulary fitted to the tokenizer."""
    model_config = replace(config.base, vocab_size=data.tokenizer.vocab_size)
    if data.max_len > model_config.max_seq_len:
        raise ConfigError(f"examples reach {data.max_len} tokens but base.max_seq_len is "
                          f"{model_config.max_seq_len}", field="base.max_seq_len")
    return model_config


def pretrain_stage(config: ExperimentConfig, data: TaskData, out_dir: Path) -> BaseLm:
    """Pretrain the main path, or reload it, and freeze it."""
    checkpoint = out_dir / BASE_CHECKPOINT
    model_config = base_model_config(config, data)
    if checkpoint.exists():
        logger.info(f"Resuming from {checkpoint}")
    else:
        pretrain(config.pretrain, model_config, data.train, data.val,
                 data.tokenizer.pad_id, out_dir)
    # Always the stored weights, so digests match on resume at any precision
    model = load_base_lm(checkpoint, base_checkpoint_config(model_config,
                                                            config.pretrain.fingerprint()))
    return model.freeze()


def l2d_stage(train_config: TrainConfig, diffusion: DiffusionConfig, data: TaskData,
              base: BaseLm, out_dir: Path) -> DiffusionPath:
    """Train a diffusion path on a frozen main path, or reload it."""
    checkpoint = out_dir / PATH_CHECKPOINT
    if checkpoint.exists():
        logger.info(f"Resuming from {checkpoint}")
        path = load_path(checkpoint, base, path_checkpoint_config(
            diffusion, base.config, train_config.fingerprint()))
        path.eval()
        return path
    path = init_from_main(base, diffusion).to(base.embedding_table.dtype)
    train(train_config, base, path, data.train, data.val, data.tokenizer.pad_id, out_dir)
    return path


def baseline_stage(train_config: TrainConfig, data: TaskData, base: BaseLm,
                   out_dir: Path) -> BaseLm:
    """Finetune the LoRA baseline, or reload it."""
    checkpoint = out_dir / BASELINE_CHECKPOINT
    if checkpoint.exists():
        logger.info(f"Resuming from {checkpoint}")
        return load_baseline(checkpoint, baseline_checkpoint_config(base.config, train_config))
    model, _ = baseline_lora_finetune(train_config, base, data.train, data.val,
                                      data.tokenizer.pad_id, out_dir)
    return model


def build_arms(config: ExperimentConfig) -> List[Arm]:
    """Diffusion-path arms implied by the sweep kind."""
    sweep, ev = config.sweep, config.eval
    default = [(ev.solver_kind, list(ev.budgets))]

    if sweep.kind == "sigma":
        return [Arm(f"l2d_sigma{s:g}", replace(config.diffusion, sigma=float(s)), default,
                    ev.guidance, ev.adaptive) for s in sweep.sigmas]
    if sweep.kind == "init":
        return [Arm(f"l2d_{mode}", replace(config.diffusion, init_mode=mode), default,
                    ev.guidance, ev.adaptive) for mode in sweep.init_modes]
    if sweep.kind == "guidance":
        return [Arm("l2d", config.diffusion, default, list(sweep.guidance_strengths),
                    ev.adaptive)]
    if sweep.kind == "solvers":
        plan = [(kind, [budget]) for kind, budget in sorted(sweep.solver_budgets.items())]
        return [Arm("l2d", config.diffusion, plan, ev.guidance, True)]
    if sweep.kind == "steps":
        return [Arm("l2d", config.diffusion, [(ev.solver_kind, list(STEP_SWEEP_BUDGETS))],
                    ev.guidance, ev.adaptive)]
    return [Arm("l2d", config.diffusion, default, ev.guidance, ev.adaptive)]


def _seeded(train_config: TrainConfig, seed: int) -> TrainConfig:
    return replace(train_config, seed=seed)


def _seeded_diffusion(arm: Arm, seed: int) -> DiffusionConfig:
    return replace(arm.diffusion, init_seed=arm.diffusion.init_seed + seed)


def verify_checkpoints(config: ExperimentConfig, data: TaskData, out_dir: Path) -> int:
    """
    Compare every checkpoint a resumed experiment would reuse with ``config``.

    Runs before anything is written, so a mismatch leaves the experiment
    directory (``config.json`` included) as the earlier run left it.

    Returns:
        Number of existing checkpoints checked.

    Raises:
        CheckpointError: a checkpoint was written under different settings;
            ``field`` names the first differing one.
    """
    base_config = base_model_config(config, data)
    runs = out_dir / "runs"
    expected = {out_dir / "base" / BASE_CHECKPOINT: (
        BASE_KIND, base_checkpoint_config(base_config, config.pretrain.fingerprint()))}
    for seed in config.seeds:
        if config.run_baseline:
            run_dir = runs / RunTask("", "baseline_lora", seed).task_id
            expected[run_dir / BASELINE_CHECKPOINT] = (BASELINE_KIND, baseline_checkpoint_config(
                base_config, _seeded(config.baseline, seed)))
        for arm in build_arms(config):
            run_dir = runs / RunTask("", arm.name, seed).task_id
            expected[run_dir / PATH_CHECKPOINT] = (PATH_KIND, path_checkpoint_config(
                _seeded_diffusion(arm, seed), base_config,
                _seeded(config.l2d, seed).fingerprint()))

    checked = 0
    for file, (kind, sections) in expected.items():
        if file.exists():
            check_config(file, read_config(file, kind), sections)
            checked += 1
    if checked:
        logger.info(f"{checked} existing checkpoints match the config")
    return checked


def _relabel(rows: Sequence[EvalRow], arm: str) -> List[EvalRow]:
    return [replace(row, arm=arm) if row.arm == "l2d" else row for row in rows]


class ExperimentRunner:
    """Runs the independent (arm, seed) jobs of one experiment."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, data: TaskData, base: BaseLm):
        self.config = config
        self.out_dir = out_dir
        self.data = data
        self.base = base
        self.arms = {arm.name: arm for arm in build_arms(config)}

    def tasks(self) -> List[RunTask]:
        jobs = [RunTask("", "base", seed) for seed in self.config.seeds]
        if self.config.run_baseline:
            jobs += [RunTask("", "baseline_lora", seed) for seed in self.config.seeds]
        for name in self.arms:
            jobs += [RunTask("", name, seed) for seed in self.config.seeds]
        return jobs

    def __call__(self, job: RunTask) -> Dict[str, Any]:
        run_dir = self.out_dir / "runs" / job.task_id
        log = RunLoggerAdapter(logger, {"arm": job.arm, "seed": job.seed})
        log.info(f"Starting {job.task_id}")
        ev = self.config.eval

        if job.arm == "base":
            rows = [row for task in self.data.tasks
                    for row in evaluate_lm_arm(self.base, task, "base", [job.seed],
                                               ev.mode.final_temperature, ev.split,
                                               ev.max_examples).rows]
            return {"rows": rows, "loss_grid": []}

        if job.arm == "baseline_lora":
            model = baseline_stage(_seeded(self.config.baseline, job.seed), self.data,
                                   self.base, run_dir)
            rows = [row for task in self.data.tasks
                    for row in evaluate_lm_arm(model, task, "baseline_lora", [job.seed],
                                               ev.mode.final_temperature, ev.split,
                                               ev.max_examples).rows]
            return {"rows": rows, "loss_grid": []}

        arm = self.arms[job.arm]
        diffusion = _seeded_diffusion(arm, job.seed)
        train_config = _seeded(self.config.l2d, job.seed)
        path = l2d_stage(train_config, diffusion, self.data, self.base, run_dir)
        trace_dir = run_dir / "traces" if ev.write_traces else None

        rows: List[EvalRow] = []
        loss_grid: List[Dict[str, Any]] = []
        for task in self.data.tasks:
            for index, (kind, budgets) in enumerate(arm.solver_budgets):
                adaptive = ev.adaptive_spec() if arm.adaptive and index == 0 else None
                report = evaluate(self.base, path, task, budgets, [job.seed], arm.guidance,
                                  kind, adaptive, ev.mode, ev.split, ev.max_examples,
                                  include_base=False, trace_dir=trace_dir)
                rows.extend(_relabel(report.rows, arm.name))
            grid = evaluate_loss_grid(self.base, path, task.val, train_config,
                                      self.data.tokenizer.pad_id)
            loss_grid.extend({"task": task.kind.value, "arm": arm.name, "seed": job.seed,
                              "t": t, "loss": loss} for t, loss in grid.items())
        return {"rows": rows, "loss_grid": loss_grid}


def _sort_key(row: EvalRow):
    return (row.task, row.arm, row.solver, row.budget,
            -1.0 if row.w_g is None else row.w_g, row.seed)


def write_loss_grid(rows: Sequence[Dict[str, Any]], file: Path) -> Path:
    with open(file, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("task", "arm", "seed", "t", "loss"))
        for row in sorted(rows, key=lambda r: (r["task"], r["arm"], r["seed"], r["t"])):
            writer.writerow((row["task"], row["arm"], row["seed"], f"{row['t']:.2f}",
                             f"{row['loss']:.6f}"))
    return file


def write_step_sweep(rows: Sequence[EvalRow], budgets: Sequence[int], file: Path) -> Path:
    """Accuracy per (task, arm, w_g, seed) with one column per budget."""
    table: Dict[tuple, Dict[int, float]] = {}
    for row in rows:
        if row.arm in ("base", "baseline_lora") or row.solver == "adaptive_rk2":
            continue
        key = (row.task, row.arm, "" if row.w_g is None else f"{row.w_g:g}", row.seed)
        table.setdefault(key, {})[row.budget] = row.accuracy

    with open(file, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["task", "arm", "w_g", "seed"] + [f"acc_T{b}" for b in budgets])
        for key in sorted(table):
            values = table[key]
            writer.writerow(list(key) + ["" if b not in values else f"{values[b]:.6f}"
                                         for b in budgets])
    return file


def run_experiment(source: Union[str, Path, Dict[str, Any], ExperimentConfig],
                   artifact_root: Optional[Union[str, Path]] = None,
                   workers: Optional[int] = None) -> Path:
    """
    Run (or resume) an experiment and return its artifact directory.

    Args:
        source: Config file, parsed mapping or ``ExperimentConfig``.
        artifact_root: Overrides ``L2D_ARTIFACT_ROOT``.
        workers: Worker slots for independent (arm, seed) runs; overrides the
            config and ``L2D_WORKERS``.

    Raises:
        ConfigError: invalid or incomplete configuration.
        CheckpointError: an existing checkpoint is corrupted or mismatched.
        L2DError: any run failed.
    """
    config = source if isinstance(source, ExperimentConfig) else load_experiment_config(source)
    settings = get_settings()
    root = Path(artifact_root if artifact_root is not None else settings.artifact_root)
    out_dir = root / config.name
    out_dir.mkdir(parents=True, exist_ok=True)

    if settings.log_to_file:
        setup_logger(level=settings.log_level, log_to_file=True, log_dir=out_dir / "logs",
                     json_format=settings.json_logs)
    n_workers = workers or config.workers or settings.workers

    previous = torch.get_default_dtype()
    set_precision(config.precision or settings.precision)
    try:
        data = prepare_data(config)
        verify_checkpoints(config, data, out_dir)
        ConfigManager.save_snapshot(config, out_dir / "config.json")
        base = pretrain_stage(config, data, out_dir / "base")
        runner = ExperimentRunner(config, out_dir, data, base)
        results = run_parallel(runner.tasks(), runner, max_workers=n_workers)
    finally:
        torch.set_default_dtype(previous)

    failed = [r for r in results if not r.success]
    if failed:
        details = "; ".join(f"{r.task_id}: {r.error}" for r in failed)
        raise L2DError(f"{len(failed)} of {len(results)} runs failed: {details}")

    rows = sorted((row for r in results for row in r.result["rows"]), key=_sort_key)
    report = EvalReport(",".join(config.tasks), list(config.seeds), rows)
    report.to_csv(out_dir / "summary.csv")
    report.to_csv(out_dir / "timing.csv", include_timing=True)
    write_loss_grid([g for r in results for g in r.result["loss_grid"]],
                    out_dir / "loss_grid.csv")
    if config.sweep.kind in ("none", "steps"):
        budgets = STEP_SWEEP_BUDGETS if config.sweep.kind == "steps" else config.eval.budgets
        write_step_sweep(rows, budgets, out_dir / "step_sweep.csv")

    logger.info(f"Experiment '{config.name}' written to {out_dir}")
    return out_dir

"""
Command-line interface: ``l2d <subcommand> [options]``.

Training and sweep subcommands read an experiment config (JSON) and accept
flags for the most common fields; anything else can be overridden with
``--set section.field=value`` (the value is parsed as JSON when possible).
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .. import __version__
from ..core.config import ConfigManager, from_dict, get_settings
from ..core.errors import ConfigError, L2DError
from ..core.numerics import make_generator, set_precision
from ..diffusion.path import NULL_CLASS, load_path
from ..inference.generation import (GUIDANCE_FORMS, GuidanceSpec, PredictionMode,
                                    base_generate, generate_sequence, write_trace)
from ..inference.solvers import ERROR_ESTIMATE_KINDS, FIXED_KINDS, SOLVER_KINDS, SolverSpec
from ..model.base_lm import load_base_lm
from ..training.trainer import load_baseline
from ..utils.logger import get_logger, setup_logger
from .evaluation import EvalReport, evaluate
from .experiments import (ExperimentConfig, baseline_stage, l2d_stage, load_experiment_config,
                          prepare_data, pretrain_stage, run_experiment)
from .tasks import TASK_MARKERS, CharTokenizer, TaskKind, TaskSizes, load_tasks

logger = get_logger("cli")

SWEEP_COMMANDS = {
    "sweep-steps": "steps",
    "sweep-guidance": "guidance",
    "sweep-sigma": "sigma",
    "solver-bench": "solvers",
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict[str, Any], assignments: Sequence[str]) -> Dict[str, Any]:
    """Apply ``a.b.c=value`` assignments to a nested config mapping in place."""
    for assignment in assignments:
        key, sep, value = assignment.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {assignment!r}")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override inside non-object field {part!r}",
                                  field=key)
            node = child
        node[parts[-1]] = _parse_value(value)
    return data


def _csv_list(cast):
    def parse(text: str) -> List[Any]:
        return [cast(item) for item in text.split(",") if item.strip()]
    return parse


def _guidance_value(text: str) -> Optional[float]:
    return None if text.lower() in ("none", "null") else float(text)


def prompt_class(prompt: str) -> int:
    """Class label of a task prompt from its marker, or the null class."""
    if len(prompt) > 1 and prompt[1] in TASK_MARKERS:
        return TaskKind.from_marker(prompt[1]).class_id
    return NULL_CLASS


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--artifact-root", help="Overrides L2D_ARTIFACT_ROOT")
    parser.add_argument("--workers", type=int, help="Parallel (arm, seed) runs")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")


def _add_config(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Experiment config (JSON)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="Override a config field (repeatable)")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--steps", type=int)
    group.add_argument("--epochs", type=int)
    group.add_argument("--lr-peak", type=float)
    group.add_argument("--lr-floor", type=float)
    group.add_argument("--warmup-steps", type=int)
    group.add_argument("--batch-size", type=int)
    group.add_argument("--grad-clip", type=float)
    group.add_argument("--lora-rank", type=int)
    group.add_argument("--lora-alpha", type=float)
    group.add_argument("--timestep-sampling", choices=("uniform", "cosmap"))
    group.add_argument("--class-dropout", type=float)
    group.add_argument("--loss-on", choices=("all", "answer"))
    group.add_argument("--seed", type=int)


def _add_diffusion_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("diffusion path")
    group.add_argument("--sigma", type=float)
    group.add_argument("--d-bar", type=int)
    group.add_argument("--init-mode", choices=("lora", "full", "scratch"))
    group.add_argument("--kv-source", choices=("same_block", "last_block"))
    group.add_argument("--gate-kind", choices=("vector", "scalar"))


def _add_solver_flags(parser: argparse.ArgumentParser, multi: bool) -> None:
    group = parser.add_argument_group("solver")
    if multi:
        group.add_argument("--budgets", type=_csv_list(int), help="e.g. 1,2,4,8,15,31")
        group.add_argument("--w-g", type=_csv_list(_guidance_value),
                           help="Guidance strengths, 'none' for unguided")
        group.add_argument("--adaptive", action="store_true", default=None)
    else:
        group.add_argument("--budget", type=int, default=15)
        group.add_argument("--w-g", type=float)
        group.add_argument("--guidance-form", choices=GUIDANCE_FORMS, default="standard")
    group.add_argument("--solver", choices=SOLVER_KINDS if not multi else FIXED_KINDS)
    group.add_argument("--abs-tol", type=float)
    group.add_argument("--rel-tol", type=float)
    group.add_argument("--error-estimate", choices=ERROR_ESTIMATE_KINDS)
    group.add_argument("--prediction", choices=("sample", "expectation"))
    group.add_argument("--temperature", type=float, help="Per-step prediction temperature")
    group.add_argument("--final-temperature", type=float)
    group.add_argument("--no-anneal", action="store_true")


_TRAIN_FLAGS = ("steps", "epochs", "lr_peak", "lr_floor", "warmup_steps", "batch_size",
                "grad_clip", "lora_rank", "lora_alpha", "timestep_sampling",
                "class_dropout", "loss_on", "seed")
_DIFFUSION_FLAGS = ("sigma", "d_bar", "init_mode", "kv_source", "gate_kind")


def _collect(args: argparse.Namespace, names: Sequence[str], prefix: str) -> List[str]:
    out = []
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out.append(f"{prefix}.{name}={json.dumps(value)}")
    return out


def _mode_overrides(args: argparse.Namespace) -> List[str]:
    out = []
    for flag, key in (("prediction", "kind"), ("temperature", "base_temperature"),
                      ("final_temperature", "final_temperature")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"eval.mode.{key}={json.dumps(value)}")
    if getattr(args, "no_anneal", False):
        out.append("eval.mode.anneal=false")
    return out


def _load_config(args: argparse.Namespace, section: Optional[str] = None,
                 extra: Sequence[str] = ()) -> ExperimentConfig:
    data = ConfigManager.read_json(args.config)
    overrides = list(extra)
    if section is not None:
        overrides += _collect(args, _TRAIN_FLAGS, section)
    overrides += _collect(args, _DIFFUSION_FLAGS, "diffusion")
    overrides += list(args.overrides)
    return load_experiment_config(apply_overrides(data, overrides))


def _out_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    root = args.artifact_root or get_settings().artifact_root
    return Path(root) / config.name


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _load_config(args, "pretrain")
    set_precision(config.precision or get_settings().precision)
    out_dir = _out_dir(args, config)
    pretrain_stage(config, prepare_data(config), out_dir / "base")
    # only once the stage accepted any checkpoint it reused
    ConfigManager.save_snapshot(config, out_dir / "config.json")
    print(out_dir / "base")
    return 0


def cmd_train_l2d(args: argparse.Namespace) -> int:
    config = _load_config(args, "l2d")
    set_precision(config.precision or get_settings().precision)
    out_dir = _out_dir(args, config)
    data = prepare_data(config)
    base = pretrain_stage(config, data, out_dir / "base")
    seed = config.l2d.seed
    run_dir = out_dir / "runs" / f"l2d_seed{seed}"
    diffusion = replace(config.diffusion, init_seed=config.diffusion.init_seed + seed)
    l2d_stage(config.l2d, diffusion, data, base, run_dir)
    ConfigManager.save_snapshot(config, out_dir / "config.json")
    print(run_dir)
    return 0


def cmd_train_baseline(args: argparse.Namespace) -> int:
    config = _load_config(args, "baseline")
    set_precision(config.precision or get_settings().precision)
    out_dir = _out_dir(args, config)
    data = prepare_data(config)
    base = pretrain_stage(config, data, out_dir / "base")
    run_dir = out_dir / "runs" / f"baseline_lora_seed{config.baseline.seed}"
    baseline_stage(config.baseline, data, base, run_dir)
    ConfigManager.save_snapshot(config, out_dir / "config.json")
    print(run_dir)
    return 0


def _adaptive_spec(args: argparse.Namespace) -> SolverSpec:
    return SolverSpec(kind="adaptive_rk2", abs_tol=args.abs_tol or 3e-4,
                      rel_tol=args.rel_tol or 3e-4,
                      error_estimate=args.error_estimate or "step_doubling")


def _prediction_mode(args: argparse.Namespace) -> PredictionMode:
    mode = PredictionMode()
    if args.prediction is not None:
        mode.kind = args.prediction
    if args.temperature is not None:
        mode.base_temperature = args.temperature
    if args.final_temperature is not None:
        mode.final_temperature = args.final_temperature
    if args.no_anneal:
        mode.anneal = False
    mode.__post_init__()
    return mode


def cmd_generate(args: argparse.Namespace) -> int:
    tokenizer = CharTokenizer()
    base = load_base_lm(args.base).freeze()
    prompt = tokenizer.encode(args.prompt)
    generator = make_generator(args.seed)
    mode = _prediction_mode(args)

    if args.path is None:
        tokens = base_generate(base, prompt, args.max_new_tokens, mode.final_temperature,
                               generator, tokenizer.eos_id)
    else:
        path = load_path(args.path, base)
        if args.solver in ("adaptive_rk2",):
            solver = _adaptive_spec(args)
        else:
            solver = SolverSpec.from_budget(args.budget, args.solver or "midpoint")
        class_id = args.class_id if args.class_id is not None else prompt_class(args.prompt)
        guidance = (GuidanceSpec(class_id, args.w_g, args.guidance_form)
                    if args.w_g is not None else None)
        trace: Optional[List[Dict[str, Any]]] = [] if args.trace else None
        tokens = generate_sequence(base, path, prompt, args.max_new_tokens, solver, guidance,
                                   mode, generator, class_id, tokenizer.eos_id, trace=trace)
        if trace is not None:
            write_trace(trace, args.trace)

    print(tokenizer.decode(tokens))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    tokenizer = CharTokenizer()
    base = load_base_lm(args.base).freeze()
    path = load_path(args.path, base) if args.path else None
    baseline = load_baseline(args.baseline) if args.baseline else None
    sizes = TaskSizes()
    if args.sizes:
        try:
            sizes = from_dict(TaskSizes, json.loads(args.sizes), "sizes")
        except json.JSONDecodeError as e:
            raise ConfigError(f"--sizes is not valid JSON: {e}", field="sizes") from e
    adaptive = _adaptive_spec(args) if args.adaptive else None

    report = EvalReport(",".join(args.tasks), args.seeds)
    for task in load_tasks(args.tasks, sizes, args.data_seed, tokenizer):
        report.extend(evaluate(base, path, task, args.budgets or [1, 15], args.seeds,
                               args.w_g or [None], args.solver or "midpoint", adaptive,
                               _prediction_mode(args), args.split, args.max_examples,
                               baseline=baseline, trace_dir=args.trace_dir))
    print(report.to_csv(args.out))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    extra = [f"sweep.kind={json.dumps(SWEEP_COMMANDS[args.command])}"]
    if args.budgets is not None:
        extra.append(f"eval.budgets={json.dumps(args.budgets)}")
    if args.w_g is not None:
        key = "sweep.guidance_strengths" if args.command == "sweep-guidance" else "eval.guidance"
        extra.append(f"{key}={json.dumps(args.w_g)}")
    if args.solver is not None:
        extra.append(f"eval.solver_kind={json.dumps(args.solver)}")
    if args.adaptive:
        extra.append("eval.adaptive=true")
    for flag in ("abs_tol", "rel_tol"):
        if getattr(args, flag) is not None:
            extra.append(f"eval.{flag}={getattr(args, flag)}")
    if args.error_estimate is not None:
        extra.append(f"eval.error_estimate={json.dumps(args.error_estimate)}")
    extra += _mode_overrides(args)
    if args.seeds is not None:
        extra.append(f"seeds={json.dumps(args.seeds)}")
    config = _load_config(args, None, extra)
    print(run_experiment(config, args.artifact_root, args.workers))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l2d", description="Train and evaluate a diffusion path on a frozen toy LM")
    parser.add_argument("--version", action="version", version=f"l2d-toy {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, section_help in (
            ("pretrain", cmd_pretrain, "Pretrain the main-path LM"),
            ("train-l2d", cmd_train_l2d, "Train a diffusion path on the frozen LM"),
            ("train-baseline", cmd_train_baseline, "LoRA-finetune the main path")):
        p = sub.add_parser(name, help=section_help)
        _add_common(p)
        _add_config(p)
        _add_train_flags(p)
        if name == "train-l2d":
            _add_diffusion_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="Generate a continuation for one prompt")
    _add_common(p)
    p.add_argument("--base", required=True, help="Main-path checkpoint")
    p.add_argument("--path", help="Diffusion-path checkpoint (omit for plain sampling)")
    p.add_argument("--prompt", required=True, help="Prompt text, e.g. '^Cabc='")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--class-id", type=int, help="Defaults to the prompt's task marker")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="Append JSONL trace records to this file")
    _add_solver_flags(p, multi=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="Score checkpoints on task test splits")
    _add_common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--path")
    p.add_argument("--baseline")
    p.add_argument("--tasks", type=_csv_list(str), default=[k.value for k in TaskKind])
    p.add_argument("--sizes", help="TaskSizes as JSON")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seeds", type=_csv_list(int), default=[0])
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--max-examples", type=int)
    p.add_argument("--trace-dir")
    p.add_argument("--out", required=True, help="Report CSV")
    _add_solver_flags(p, multi=True)
    p.set_defaults(func=cmd_eval)

    for name in SWEEP_COMMANDS:
        p = sub.add_parser(name, help=f"Run the {SWEEP_COMMANDS[name]} experiment")
        _add_common(p)
        _add_config(p)
        _add_diffusion_flags(p)
        p.add_argument("--seeds", type=_csv_list(int))
        _add_solver_flags(p, multi=True)
        p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    setup_logger(level=args.log_level or settings.log_level)
    try:
        return args.func(args)
    except L2DError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

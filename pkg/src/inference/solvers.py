"""
ODE solvers for the rectified-flow velocity field.

The integrand is given as a prediction function ``x_hat = f(x, t)``; the
velocity is ``(x_hat - x) / (1 - t)``. Fixed-step kinds walk a uniform grid
of ``endpoints`` points on [0, stop]; ``adaptive_rk2`` takes Heun steps and
estimates their error by step doubling (or, optionally, against the embedded
Euler step) under a standard step-size controller. The final prediction at
the stop time is left to the caller.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import torch
from typing_extensions import TypeAlias

from ..core.errors import AdaptiveStepError, ConfigError, NonFiniteError
from ..diffusion.schedule import DiffusionState, Schedule, velocity
from ..utils.logger import get_logger

logger = get_logger("solvers")

PredictFn: TypeAlias = Callable[[torch.Tensor, float], torch.Tensor]

FIXED_KINDS = ("euler", "midpoint", "rk4")
SOLVER_KINDS = ("single",) + FIXED_KINDS + ("adaptive_rk2",)
EVALS_PER_STEP = {"single": 0, "euler": 1, "midpoint": 2, "rk4": 4}
ERROR_ESTIMATE_KINDS = ("step_doubling", "embedded")

# Step-size controller
SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
MIN_STEP = 1e-6


@dataclass
class SolverSpec:
    """
    Which integrator to run and with what budget.

    ``single`` runs no integration steps at all: the caller predicts once at
    t = 0, which reproduces the main path exactly.
    """

    kind: str = "midpoint"
    endpoints: int = 8
    abs_tol: float = 3e-4
    rel_tol: float = 3e-4
    early_stop: Optional[bool] = None
    initial_step: float = 0.1
    max_steps: int = 10000
    error_estimate: str = "step_doubling"  # step_doubling | embedded

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ConfigError(f"solver kind must be one of {SOLVER_KINDS}", field="kind")
        if self.kind in FIXED_KINDS and self.endpoints < 2:
            raise ConfigError(f"{self.kind} needs at least 2 endpoints", field="endpoints")
        if self.kind == "adaptive_rk2":
            if self.abs_tol <= 0 or self.rel_tol <= 0:
                raise ConfigError("adaptive tolerances must be positive", field="abs_tol")
            if not 0 < self.initial_step <= 1:
                raise ConfigError("initial_step must lie in (0, 1]", field="initial_step")
            if self.error_estimate not in ERROR_ESTIMATE_KINDS:
                raise ConfigError(f"error_estimate must be one of {ERROR_ESTIMATE_KINDS}",
                                  field="error_estimate")
        if self.early_stop is None:
            self.early_stop = self.kind in ("rk4", "adaptive_rk2")
        if self.kind in ("rk4", "adaptive_rk2") and not self.early_stop:
            raise ConfigError(f"{self.kind} evaluates the velocity at the end of each "
                              "step and requires early_stop", field="early_stop")

    @classmethod
    def from_budget(cls, budget: int, kind: str = "midpoint", **kwargs) -> "SolverSpec":
        """
        Fixed-step solver spending at most ``budget`` predictions per token,
        counting the final pass.

        ``endpoints = (budget - 1) // evals_per_step + 1``, so a budget that is
        not ``1 + k * evals_per_step`` is under-spent: midpoint uses 3 of 4 and
        7 of 8, rk4 uses 13 of 15. Budgets too small for ``kind`` fall back to
        Euler; a budget of 1 is the single pass.
        """
        if budget < 1:
            raise ConfigError(f"budget must be >= 1, got {budget}", field="budget")
        if budget == 1:
            return cls(kind="single", endpoints=1, **kwargs)
        if kind not in FIXED_KINDS:
            raise ConfigError(f"budgets apply to fixed-step kinds {FIXED_KINDS}", field="kind")
        endpoints = (budget - 1) // EVALS_PER_STEP[kind] + 1
        if endpoints < 2:
            logger.debug(f"budget {budget} too small for {kind}; using euler")
            return cls(kind="euler", endpoints=budget, **kwargs)
        spent = (endpoints - 1) * EVALS_PER_STEP[kind] + 1
        if spent < budget:
            logger.debug(f"{kind} spends {spent} of budget {budget}")
        return cls(kind=kind, endpoints=endpoints, **kwargs)

    @property
    def expected_evals(self) -> Optional[int]:
        """Predictions per token including the final pass (None if adaptive)."""
        if self.kind == "adaptive_rk2":
            return None
        if self.kind == "single":
            return 1
        return (self.endpoints - 1) * EVALS_PER_STEP[self.kind] + 1

    def stop_time(self, schedule: Schedule) -> float:
        if self.kind == "single":
            return 0.0
        return schedule.early_stop_time if self.early_stop else 1.0


@dataclass
class StepRecord:
    t: float
    step_size: float
    evals: int
    accepted: bool = True
    error_ratio: Optional[float] = None


@dataclass
class IntegrationResult:
    x: torch.Tensor
    t: float
    evals: int
    steps: int = 0
    rejected: int = 0
    records: List[StepRecord] = field(default_factory=list)


class _Field:
    """Velocity from predictions, counting evaluations."""

    def __init__(self, predict: PredictFn, schedule: Schedule):
        self.predict = predict
        self.schedule = schedule
        self.evals = 0

    def __call__(self, x: torch.Tensor, t: float) -> torch.Tensor:
        x_hat = self.predict(x, t)
        self.evals += 1
        return velocity(x_hat, DiffusionState(x, torch.tensor(t, dtype=x.dtype)), self.schedule)


def _euler(f: _Field, x: torch.Tensor, t: float, h: float) -> torch.Tensor:
    return x + h * f(x, t)


def _midpoint(f: _Field, x: torch.Tensor, t: float, h: float) -> torch.Tensor:
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    return x + h * k2


def _rk4(f: _Field, x: torch.Tensor, t: float, h: float) -> torch.Tensor:
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


FIXED_STEPPERS: Dict[str, Callable[[_Field, torch.Tensor, float, float], torch.Tensor]] = {
    "euler": _euler,
    "midpoint": _midpoint,
    "rk4": _rk4,
}


def _check(x: torch.Tensor, t: float) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"solver state became non-finite at t={t:.6f}")


def _integrate_fixed(spec: SolverSpec, f: _Field, x: torch.Tensor,
                     stop: float) -> IntegrationResult:
    stepper = FIXED_STEPPERS[spec.kind]
    n = spec.endpoints - 1
    grid = [stop * i / n for i in range(spec.endpoints)]
    grid[-1] = stop
    result = IntegrationResult(x, 0.0, 0)
    for t, t_next in zip(grid[:-1], grid[1:]):
        h = t_next - t
        x = stepper(f, x, t, h)
        _check(x, t_next)
        result.steps += 1
        result.records.append(StepRecord(t=t, step_size=h, evals=f.evals))
    result.x, result.t, result.evals = x, stop, f.evals
    return result


def _heun(f: _Field, x: torch.Tensor, t: float, h: float,
          k1: Optional[torch.Tensor] = None) -> torch.Tensor:
    k1 = f(x, t) if k1 is None else k1
    k2 = f(x + h * k1, t + h)
    return x + 0.5 * h * (k1 + k2)


def _attempt_embedded(f: _Field, x: torch.Tensor, t: float, h: float):
    """Heun step with the embedded Euler step as the error reference (2 evals)."""
    k1 = f(x, t)
    x_low = x + h * k1
    k2 = f(x_low, t + h)
    return x + 0.5 * h * (k1 + k2), x_low


def _attempt_doubling(f: _Field, x: torch.Tensor, t: float, h: float):
    """
    Two half Heun steps against one full step (5 evals, k1 shared).

    The two-half-step error is ``(x_two - x_full) / 3``; the accepted state
    is the Richardson-extrapolated one.
    """
    k1 = f(x, t)
    x_full = _heun(f, x, t, h, k1)
    x_half = _heun(f, x, t, 0.5 * h, k1)
    x_two = _heun(f, x_half, t + 0.5 * h, 0.5 * h)
    return x_two + (x_two - x_full) / 3.0, x_two


ERROR_ESTIMATES = {"step_doubling": _attempt_doubling, "embedded": _attempt_embedded}
# Exponent of the step-size update: 1 / (order of the error estimate + 1)
_CONTROL_EXPONENT = {"step_doubling": 1.0 / 3.0, "embedded": 0.5}


def _integrate_adaptive(spec: SolverSpec, f: _Field, x: torch.Tensor,
                        stop: float) -> IntegrationResult:
    attempt = ERROR_ESTIMATES[spec.error_estimate]
    exponent = _CONTROL_EXPONENT[spec.error_estimate]
    result = IntegrationResult(x, 0.0, 0)
    t = 0.0
    h = min(spec.initial_step, stop)
    while t < stop:
        if result.steps + result.rejected >= spec.max_steps:
            raise AdaptiveStepError(f"adaptive solver exceeded {spec.max_steps} steps")
        h = min(h, stop - t)

        x_new, x_ref = attempt(f, x, t, h)
        _check(x_new, t + h)

        scale = spec.abs_tol + spec.rel_tol * torch.maximum(x.abs(), x_new.abs())
        ratio = float(((x_new - x_ref).abs() / scale).max())
        accepted = ratio <= 1.0
        result.records.append(StepRecord(t=t, step_size=h, evals=f.evals,
                                          accepted=accepted, error_ratio=ratio))
        if accepted:
            t = stop if stop - (t + h) < 1e-12 else t + h
            x = x_new
            result.steps += 1
        else:
            result.rejected += 1

        factor = MAX_FACTOR if ratio == 0 else SAFETY * ratio ** -exponent
        h = h * min(MAX_FACTOR, max(MIN_FACTOR, factor))
        if t < stop and h < MIN_STEP:
            raise AdaptiveStepError(f"step size {h:.3e} underflowed at t={t:.6f}")

    result.x, result.t, result.evals = x, stop, f.evals
    return result


def integrate(spec: SolverSpec, predict: PredictFn, x0: torch.Tensor,
              schedule: Schedule) -> IntegrationResult:
    """
    Integrate the velocity field from t = 0 to the solver stop time.

    Args:
        spec: Solver kind and budget.
        predict: ``x_hat = predict(x, t)``.
        x0: Initial noise.
        schedule: Supplies sigma (early stop) and the velocity guard.
    """
    _check(x0, 0.0)
    stop = spec.stop_time(schedule)
    if spec.kind == "single" or stop <= 0.0:
        return IntegrationResult(x0, 0.0, 0)

    f = _Field(predict, schedule)
    if spec.kind == "adaptive_rk2":
        return _integrate_adaptive(spec, f, x0, stop)
    return _integrate_fixed(spec, f, x0, stop)

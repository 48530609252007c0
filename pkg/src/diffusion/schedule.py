"""
Rectified-flow corruption process.

Data sits at t = 1 and Gaussian noise ``N(0, sigma^2 I)`` at t = 0; every
intermediate state is the straight-line mix ``x_t = t * x1 + (1 - t) * x0``.
Everything here is pure tensor math: randomness only enters through an
explicit ``torch.Generator`` (or caller-provided noise).
"""

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
from typing_extensions import TypeAlias

from ..core.errors import ConfigError, VelocitySingularityError

TimeLike: TypeAlias = Union[float, torch.Tensor]

TIMESTEP_KINDS = ("uniform", "cosmap")


@dataclass(frozen=True)
class Schedule:
    """alpha(t) = t, beta(t) = 1 - t, with the noise scale carried by sigma."""

    sigma: float = 64.0
    velocity_guard: float = 1e-6

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}", field="sigma")
        if not 0 < self.velocity_guard < 1:
            raise ConfigError("velocity_guard must lie in (0, 1)", field="velocity_guard")

    @staticmethod
    def alpha(t: TimeLike) -> TimeLike:
        return t

    @staticmethod
    def beta(t: TimeLike) -> TimeLike:
        return 1 - t

    def noise_std(self, t: TimeLike) -> TimeLike:
        """Per-component std of x_t when x1 has unit component variance."""
        if isinstance(t, torch.Tensor):
            return torch.sqrt(t * t + (1 - t) ** 2 * self.sigma ** 2)
        return math.sqrt(t * t + (1 - t) ** 2 * self.sigma ** 2)

    @property
    def early_stop_time(self) -> float:
        """Stop time ``1 - 1/sigma`` used by the higher-order solvers."""
        return max(0.0, 1.0 - 1.0 / self.sigma)


@dataclass
class DiffusionState:
    """A diffusion token ``x`` (..., d_bar) and its timestep ``t``."""

    x: torch.Tensor
    t: torch.Tensor

    def __post_init__(self):
        self.t = torch.as_tensor(self.t, dtype=self.x.dtype)
        check_timesteps(self.t)

    @property
    def t_expanded(self) -> torch.Tensor:
        """``t`` reshaped to broadcast against ``x``."""
        return expand_time(self.t, self.x)


def check_timesteps(t: torch.Tensor) -> None:
    if torch.isnan(t).any() or (t < 0).any() or (t > 1).any():
        raise ValueError("timesteps must lie in [0, 1]")


def expand_time(t: TimeLike, like: torch.Tensor) -> torch.Tensor:
    """Append trailing singleton dims so ``t`` broadcasts against ``like``."""
    t = torch.as_tensor(t, dtype=like.dtype)
    missing = like.dim() - t.dim()
    if missing > 0:
        t = t.reshape(tuple(t.shape) + (1,) * missing)
    return t


def corrupt(x1: torch.Tensor, t: TimeLike, schedule: Schedule,
            generator: Optional[torch.Generator] = None,
            noise: Optional[torch.Tensor] = None) -> DiffusionState:
    """
    Mix clean embeddings with fresh noise: ``x_t = t * x1 + (1 - t) * x0``.

    Args:
        x1: Clean diffusion tokens, shape (..., d_bar).
        t: Timesteps broadcastable over the leading dims of ``x1``.
        schedule: Supplies sigma.
        generator: RNG for ``x0`` when ``noise`` is not given.
        noise: Pre-drawn ``x0`` (already scaled by sigma).
    """
    t = torch.as_tensor(t, dtype=x1.dtype)
    check_timesteps(t)
    if noise is None:
        noise = torch.randn(x1.shape, generator=generator, dtype=x1.dtype) * schedule.sigma
    tx = expand_time(t, x1)
    x_t = schedule.alpha(tx) * x1 + schedule.beta(tx) * noise
    return DiffusionState(x_t, t.expand(x1.shape[:-1]) if t.dim() == 0 else t)


def cosmap(u: torch.Tensor) -> torch.Tensor:
    """Inverse CDF of the cosmap density: ``t = (1 + tan(pi/2 * (u - 1/2))) / 2``."""
    t = 0.5 * (1.0 + torch.tan(0.5 * math.pi * (u.to(torch.float64) - 0.5)))
    return t.clamp(0.0, 1.0).to(u.dtype)


def cosmap_cdf(t: torch.Tensor) -> torch.Tensor:
    """CDF of the cosmap density, ``1/2 + (2/pi) atan(2t - 1)``."""
    t = t.to(torch.float64)
    return 0.5 + (2.0 / math.pi) * torch.atan(2.0 * t - 1.0)


def cosmap_density(t: torch.Tensor) -> torch.Tensor:
    """``2 / (pi (1 - 2t + 2t^2))`` on [0, 1]."""
    t = t.to(torch.float64)
    return 2.0 / (math.pi * (1.0 - 2.0 * t + 2.0 * t * t))


def sample_timesteps(count: int, kind: str = "uniform",
                     generator: Optional[torch.Generator] = None,
                     dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """Draw ``count`` i.i.d. training timesteps from the named density."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if kind not in TIMESTEP_KINDS:
        raise ConfigError(f"Unknown timestep sampling kind: {kind!r}",
                          field="timestep_sampling")

    dtype = dtype or torch.get_default_dtype()
    u = torch.rand(count, generator=generator, dtype=torch.float64)
    if kind == "cosmap":
        u = cosmap(u)
    return u.to(dtype)


def input_rescale(state: DiffusionState, schedule: Schedule) -> torch.Tensor:
    """Divide ``x_t`` by its expected per-component std ``sqrt(t^2 + (1-t)^2 sigma^2)``."""
    return state.x / schedule.noise_std(state.t_expanded)


def velocity(x_hat: torch.Tensor, state: DiffusionState,
             schedule: Schedule) -> torch.Tensor:
    """Rectified-flow velocity ``(x_hat - x_t) / (1 - t)``."""
    if (state.t >= 1.0 - schedule.velocity_guard).any():
        raise VelocitySingularityError(
            f"velocity undefined within {schedule.velocity_guard} of t = 1; "
            "stop integration earlier"
        )
    return (x_hat - state.x) / (1.0 - state.t_expanded)

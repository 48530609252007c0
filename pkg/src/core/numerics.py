"""
Numerical substrate: precision switching, seeding, gradient plumbing.

Dense tensors and the reverse-mode tape are torch's (``torch.Tensor`` and the
autograd graph). This module adds the contracts the rest of the package relies
on: a runtime precision switch, reproducible seeding that is safe to use from
worker threads, a scalar-checked ``backward`` and a central finite-difference
oracle for gradient checks.
"""

import hashlib
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Union

import torch
from torch import nn

from .errors import GradientContractError, NonFiniteError
from ..utils.logger import get_logger

logger = get_logger("numerics")

# torch's global RNG and default dtype are process-wide
_GLOBAL_STATE_LOCK = threading.RLock()


class Precision(str, Enum):
    """Floating point precision modes."""

    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self is Precision.FLOAT32 else torch.float64


def as_precision(value: Union[str, Precision]) -> Precision:
    """Coerce a string such as ``"float64"`` to a ``Precision``."""
    try:
        return Precision(value)
    except ValueError as e:
        raise ValueError(f"Unknown precision: {value!r}") from e


def set_precision(value: Union[str, Precision]) -> torch.dtype:
    """Set the default floating point dtype for newly created tensors."""
    dtype = as_precision(value).dtype
    torch.set_default_dtype(dtype)
    return dtype


@contextmanager
def precision(value: Union[str, Precision]) -> Iterator[torch.dtype]:
    """Temporarily switch the default dtype (64-bit for gradient checks)."""
    with _GLOBAL_STATE_LOCK:
        previous = torch.get_default_dtype()
        dtype = set_precision(value)
        try:
            yield dtype
        finally:
            torch.set_default_dtype(previous)


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """
    Run a block with torch's global RNG seeded to ``seed``.

    The global RNG state is forked and restored afterwards, and the block holds
    a process-wide lock so parameter initialisation stays reproducible while
    other runs execute on worker threads.
    """
    with _GLOBAL_STATE_LOCK:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            yield


def make_generator(seed: int) -> torch.Generator:
    """Create an explicit CPU generator; all sampling takes one of these."""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def check_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    """Raise ``NonFiniteError`` if ``tensor`` holds NaN or Inf."""
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return tensor


def backward(loss: torch.Tensor) -> None:
    """
    Populate ``.grad`` on every leaf that requires gradients.

    A loss that does not depend on any such leaf is a no-op.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise GradientContractError(
            f"backward needs a scalar loss, got shape {tuple(loss.shape)}"
        )
    if not loss.requires_grad:
        return
    loss.reshape(()).backward()


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison."""

    max_rel_error: float
    entries_checked: int
    finite: bool = True
    worst_parameter: Optional[int] = None
    message: str = ""

    def passed(self, tolerance: float) -> bool:
        return self.finite and self.max_rel_error < tolerance


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-4,
    abs_floor: float = 1e-12,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare autograd gradients of ``f`` against central differences.

    Args:
        f: Zero-argument closure returning a scalar; must be deterministic.
        params: Leaf tensors to perturb in place (restored afterwards).
        step: Central difference step.
        abs_floor: Added to ``|g_fd|`` in the relative error denominator.
        max_entries: Check at most this many randomly chosen entries per
            parameter (all entries when None).
        seed: Seed for the entry subsampling.

    Returns:
        GradCheckReport with max over entries of
        ``|g_ad - g_fd| / (|g_fd| + abs_floor)``.
    """
    params = list(params)
    loss = f()
    if loss.numel() != 1:
        raise GradientContractError("finite_difference_check needs a scalar f")
    if not torch.isfinite(loss).all():
        return GradCheckReport(float("inf"), 0, finite=False,
                               message="f is non-finite at the base point")

    grads = torch.autograd.grad(loss, params, allow_unused=True)
    chooser = make_generator(seed)

    worst = 0.0
    worst_index: Optional[int] = None
    checked = 0

    with torch.no_grad():
        for index, (param, grad) in enumerate(zip(params, grads)):
            if not param.is_contiguous():
                raise GradientContractError("parameters must be contiguous")
            flat = param.data.view(-1)
            analytic = (torch.zeros_like(flat) if grad is None
                        else grad.detach().reshape(-1))

            if max_entries is not None and flat.numel() > max_entries:
                entries: Iterable[int] = torch.randperm(
                    flat.numel(), generator=chooser)[:max_entries].tolist()
            else:
                entries = range(flat.numel())

            for i in entries:
                original = flat[i].item()
                flat[i] = original + step
                f_plus = f().item()
                flat[i] = original - step
                f_minus = f().item()
                flat[i] = original

                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    return GradCheckReport(
                        float("inf"), checked, finite=False,
                        worst_parameter=index,
                        message=f"f is non-finite near parameter {index}[{i}]",
                    )

                numeric = (f_plus - f_minus) / (2.0 * step)
                error = abs(analytic[i].item() - numeric) / (abs(numeric) + abs_floor)
                checked += 1
                if error > worst:
                    worst = error
                    worst_index = index

    logger.debug(f"Gradient check: {checked} entries, max rel error {worst:.3e}")
    return GradCheckReport(worst, checked, worst_parameter=worst_index)


def parameter_digest(source: Union[nn.Module, Iterable[torch.Tensor]]) -> str:
    """SHA-256 over the raw bytes of every parameter (and named buffers)."""
    hasher = hashlib.sha256()
    if isinstance(source, nn.Module):
        items: List = list(source.state_dict().items())
    else:
        items = [(str(i), t) for i, t in enumerate(source)]

    for name, tensor in items:
        hasher.update(name.encode("utf-8"))
        hasher.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return hasher.hexdigest()

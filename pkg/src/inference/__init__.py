"""
ODE solvers and token generation with the diffusion path.
"""

from .generation import (GuidanceSpec, PredictionMode, generate_sequence, generate_token,
                         guided_logits, predict_xhat)
from .solvers import SolverSpec, integrate

__all__ = ["GuidanceSpec", "PredictionMode", "SolverSpec", "generate_sequence",
           "generate_token", "guided_logits", "integrate", "predict_xhat"]

"""Variational multi-task learning with Gumbel-softmax mixture priors."""

from .engine import RunConfig, RunResult, run
from .model import MethodKind, ModelConfig, MultiTaskModel
from .objective import MCConfig

__all__ = ["MCConfig", "MethodKind", "ModelConfig", "MultiTaskModel", "RunConfig", "RunResult", "run"]
__version__ = "0.1.0"

"""Safe gradient flows and model-free extremum seeking for constrained optimization."""

from .problem import ProblemSpec, builtin, evaluate, gradients, list_problems

__all__ = ["ProblemSpec", "builtin", "evaluate", "gradients", "list_problems"]
__version__ = "0.1.0"

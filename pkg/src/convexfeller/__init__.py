"""Convex expectation procedures over controlled diffusions.

Backward induction over feedback controls, the matching semilinear PDE,
Monte-Carlo path checks and a stochastic-volatility bid/ask model.
"""

from .errors import (CheckFailure, ConfigError, ModelError, NumericalError)
from .model import (BallSet, BoxSet, ConstantSigma, DiffusionSpec, GridSpec,
                    LinearConstraintSet, PointSet, PowerPenalty, QuadraticPenalty, ZeroPenalty)
from .procedure import ControlProblem, PayoffSpec, ValueField, backward_induction
from .pde import compare_fields, solve_semilinear

__version__ = "0.1.0"

__all__ = [
    "CheckFailure", "ConfigError", "ModelError", "NumericalError", "BallSet", "BoxSet",
    "ConstantSigma", "DiffusionSpec", "GridSpec", "LinearConstraintSet", "PointSet",
    "PowerPenalty", "QuadraticPenalty", "ZeroPenalty", "ControlProblem", "PayoffSpec",
    "ValueField", "backward_induction", "compare_fields", "solve_semilinear", "__version__",
]

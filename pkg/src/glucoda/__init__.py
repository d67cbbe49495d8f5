"""glucoda: constrained ensemble Kalman filtering for glucose-insulin forecasting.

Joint state-parameter estimation of the six-ODE ultradian glucose-insulin
model from sparse, irregularly sampled clinical timelines, with optional
linear equality/inequality constraints enforced at every filter update.
"""

__version__ = "0.1.0"

from ._kernel import kernel_name
from .ultradian import (
    ExogenousInputs,
    InsulinDelivery,
    NutritionEvent,
    PhysState,
    UltradianParams,
)
from .integrator import IntegratorConfig, integrate_between, solution_operator

__all__ = [
    "__version__",
    "kernel_name",
    "ExogenousInputs",
    "InsulinDelivery",
    "NutritionEvent",
    "PhysState",
    "UltradianParams",
    "IntegratorConfig",
    "integrate_between",
    "solution_operator",
]

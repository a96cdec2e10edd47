from konvlina.core.tensor import (
    ConfigurationError,
    DimensionError,
    NumericalError,
    Parameter,
    Tape,
    Tensor,
    as_tensor,
    backward,
    check_finite,
    inject_fault,
    no_record,
    track_allocations,
)
from konvlina.core.gradcheck import analytic_grad, check_gradients, finite_diff_grad, relative_error
from konvlina.core.rng import make_rng

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "NumericalError",
    "Parameter",
    "Tape",
    "Tensor",
    "analytic_grad",
    "as_tensor",
    "backward",
    "check_finite",
    "check_gradients",
    "finite_diff_grad",
    "inject_fault",
    "make_rng",
    "no_record",
    "relative_error",
    "track_allocations",
]

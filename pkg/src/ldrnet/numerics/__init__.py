"""Reverse-mode autodiff over numpy arrays, its compiled kernels and a gradient checker."""
from .engine import Tensor, ShapeError, backward, record_kinks  # noqa: F401
from .gradcheck import (KinkCrossedError, directional_check, finite_difference_check,  # noqa: F401
                        numeric_gradient, relative_error)  # noqa: F401

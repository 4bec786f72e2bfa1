"""Block self-attention sequence encoding with a from-scratch autodiff core."""

from .autodiff import (
    AllocationError,
    Graph,
    GraphError,
    METER,
    ParamStore,
    ShapeError,
    finite_difference_check,
    registered_ops,
)

__all__ = [
    "AllocationError",
    "Graph",
    "GraphError",
    "METER",
    "ParamStore",
    "ShapeError",
    "finite_difference_check",
    "registered_ops",
]

__version__ = "0.1.0"

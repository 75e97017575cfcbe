"""Structured pruning of low-rank factorized layers.

Weight matrices are parameterized as P @ Q and trained with stochastic
gates on the rank-1 components; an augmented Lagrangian controller
drives the expected surviving size to an exact target, after which the
kept components are compacted into smaller dense matrices.
"""

from .backend import COMPILED, backend_name
from .tensor import (
    DimensionError,
    DomainError,
    Graph,
    GraphError,
    Tensor,
    default_dtype,
    no_grad,
    set_default_dtype,
    set_finite_checks,
)

__version__ = "0.1.0"

__all__ = [
    "COMPILED",
    "backend_name",
    "DimensionError",
    "DomainError",
    "Graph",
    "GraphError",
    "Tensor",
    "default_dtype",
    "no_grad",
    "set_default_dtype",
    "set_finite_checks",
    "__version__",
]

"""Vehicle relocation with a differentiable ADMM layer trained end to end."""

from .admm_layer import AdmmConfig, SolverContext, solve, solve_batch, solve_with_gradients
from .qp_core import StandardQP, assemble_penalty_system, kkt_residuals
from .relocation import RelocationInstance, build_sparse_A, build_sparse_B, to_standard_qp

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig",
    "RelocationInstance",
    "SolverContext",
    "StandardQP",
    "assemble_penalty_system",
    "build_sparse_A",
    "build_sparse_B",
    "kkt_residuals",
    "solve",
    "solve_batch",
    "solve_with_gradients",
    "to_standard_qp",
]

"""
Operation Census Module
Counts the factorizations, triangular solves and matrix products one bound
evaluation performs and derives relative costs
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List

import torch

from gp.errors import ArgumentError
from gp.kernels import KernelSpec, kernel_matrix
from gp.linalg import as_tensor, jitter_cholesky
from gp.solvegp import prior_state, solvegp_bound
from gp.svgp import SvgpState, svgp_bound
from gp.variational import GaussianLikelihood, prior_factor
from performance.metrics import count_ops

logger = logging.getLogger(__name__)


@dataclass
class CensusRow:
    """Operation counts of one evaluation with their cubic and total flop costs"""
    label: str
    chol_sizes: List[int]
    cubic_cost: int
    ratio: float = 1.0
    triangular_solves: List[List[int]] = field(default_factory=list)
    matmuls: List[List[int]] = field(default_factory=list)
    work: int = 0
    work_ratio: float = 1.0


def cubic_cost(chol_sizes: List[int]) -> int:
    return sum(n ** 3 for n in chol_sizes)


def solve_cost(triangular_solves: List[List[int]]) -> int:
    """n^2 k per solve of an n x n factor against k right-hand sides"""
    return sum(n * n * k * count for n, k, count in triangular_solves)


def matmul_cost(matmuls: List[List[int]]) -> int:
    return sum(m * k * n * count for m, k, n, count in matmuls)


def total_work(snapshot: Dict[str, Any]) -> int:
    """Multiply-adds of one counter snapshot, factorizations counted as n^3"""
    return (cubic_cost(snapshot['chol_sizes']) + solve_cost(snapshot['triangular_solves'])
            + matmul_cost(snapshot['matmuls']))


def operation_census(bound_fn, *args, **kwargs) -> Dict[str, Any]:
    """Counter snapshot taken while evaluating bound_fn(*args, **kwargs) once"""
    with count_ops() as counter:
        bound_fn(*args, **kwargs)
    return counter.snapshot()


def bound_census(bound_fn, *args, **kwargs) -> List[int]:
    """Cholesky sizes recorded while evaluating bound_fn(*args, **kwargs) once"""
    return operation_census(bound_fn, *args, **kwargs)['chol_sizes']


def _svgp_prior(kernel: KernelSpec, Z: torch.Tensor, likelihood: GaussianLikelihood) -> SvgpState:
    L_u0 = jitter_cholesky(kernel_matrix(kernel, Z, Z)).detach()
    return SvgpState(Z, prior_factor(L_u0, False), kernel, likelihood)


def compare_costs(kernel: KernelSpec, X, y, M: int, likelihood: GaussianLikelihood = None) -> Dict[str, CensusRow]:
    """
    SVGP with M, SOLVE-GP with M2 = M and SVGP with 2M, all on the same data.
    Inducing sets are the first M and next M rows of X, so X needs at least 2M rows.
    """
    X = as_tensor(X)
    likelihood = likelihood or GaussianLikelihood()
    if X.shape[0] < 2 * M:
        raise ArgumentError(f"need at least {2 * M} rows to place 2M inducing points, got {X.shape[0]}")
    Z, O = X[:M], X[M:2 * M]

    snapshots = {
        'svgp_M': operation_census(svgp_bound, _svgp_prior(kernel, Z, likelihood), X, y),
        'solvegp_M_M': operation_census(solvegp_bound, prior_state(kernel, Z, O, likelihood), X, y),
        'svgp_2M': operation_census(svgp_bound, _svgp_prior(kernel, X[:2 * M], likelihood), X, y),
    }
    base = snapshots['svgp_M']
    base_cubic, base_work = cubic_cost(base['chol_sizes']), total_work(base)
    census = {}
    for label, snapshot in snapshots.items():
        cubic, work = cubic_cost(snapshot['chol_sizes']), total_work(snapshot)
        census[label] = CensusRow(label, snapshot['chol_sizes'], cubic, cubic / base_cubic,
                                  snapshot['triangular_solves'], snapshot['matmuls'], work, work / base_work)
    for row in census.values():
        logger.info(f"{row.label}: cholesky sizes {row.chol_sizes}, cost ratio {row.ratio:.1f}, "
                    f"total work {row.work} ({row.work_ratio:.2f}x)")
    return census

"""
Cholesky-based linear algebra with the package-wide jitter policy.

Every factorization of a nominally positive semi-definite matrix goes through
``jitter_cholesky``: jitter * mean(diag) is added to the diagonal, starting at
``JITTER_START`` and growing tenfold on failure up to ``JITTER_MAX``. The jitter
is detached from the autograd graph.

All helpers report to the active ``OpCounter`` (see performance.metrics).
"""

import logging
import math
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator, Optional

import torch

from gp.errors import ArgumentError, NumericalError
from performance.metrics import current_counter

logger = logging.getLogger(__name__)

DTYPE = torch.float64
JITTER_START = 1e-10
JITTER_MAX = 1e-4

_jitter_start: ContextVar[float] = ContextVar('jitter_start', default=JITTER_START)


def as_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(value, dtype=DTYPE)


def scalar_value(value) -> float:
    """Python float of a number or 0-d tensor, never through the autograd graph"""
    if isinstance(value, torch.Tensor):
        return value.detach().item()
    return float(value)


@contextmanager
def jitter_scope(jitter_start: float) -> Iterator[float]:
    """Override the first jitter tried by every factorization in the enclosed block"""
    token = _jitter_start.set(float(jitter_start))
    try:
        yield float(jitter_start)
    finally:
        _jitter_start.reset(token)


def jitter_cholesky(A: torch.Tensor, jitter_start: Optional[float] = None) -> torch.Tensor:
    """Lower Cholesky factor of A + jitter * mean(diag(A)) * I."""
    check_square(A, "matrix to factorize")
    if jitter_start is None:
        jitter_start = _jitter_start.get()
    n = A.shape[-1]
    counter = current_counter()
    if n == 0:
        return A.new_zeros((0, 0))

    scale = float(A.detach().diagonal().abs().mean())
    if not math.isfinite(scale):
        raise NumericalError("matrix to factorize has non-finite entries", jitter=jitter_start)
    if scale == 0.0:
        scale = 1.0
    eye = torch.eye(n, dtype=A.dtype)

    jitter = jitter_start
    while jitter <= JITTER_MAX * (1 + 1e-9):
        L, info = torch.linalg.cholesky_ex(A + (jitter * scale) * eye)
        if int(info) == 0:
            if jitter > jitter_start:
                logger.warning(f"Cholesky of size {n} needed jitter {jitter:.1e}")
            if counter is not None:
                counter.record_cholesky(n)
            return L
        jitter = jitter * 10.0 if jitter > 0 else JITTER_START

    raise NumericalError(f"Cholesky of size {n} failed even with jitter {jitter / 10.0:.1e}",
                         jitter=jitter / 10.0)


def tri_solve(L: torch.Tensor, B: torch.Tensor, transpose: bool = False) -> torch.Tensor:
    """Solve L X = B (or L^T X = B when transpose) for lower-triangular L."""
    counter = current_counter()
    if counter is not None:
        counter.record_solve(L.shape[-1], B.shape[-1] if B.dim() > 1 else 1)
    vector = B.dim() == 1
    rhs = B.unsqueeze(-1) if vector else B
    if L.shape[-1] == 0 or rhs.shape[-1] == 0:
        out = rhs.new_zeros((L.shape[-1], rhs.shape[-1]))
    elif transpose:
        out = torch.linalg.solve_triangular(L.transpose(-1, -2), rhs, upper=True)
    else:
        out = torch.linalg.solve_triangular(L, rhs, upper=False)
    return out.squeeze(-1) if vector else out


def _columns(B: torch.Tensor) -> int:
    return B.shape[-1] if B.dim() > 1 else 1


def matmul(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """A B for a matrix A and a matrix or vector B, counted as one (m, k, n) product."""
    counter = current_counter()
    if counter is not None:
        counter.record_matmul(A.shape[-2], A.shape[-1], _columns(B))
    return A @ B


def cross_product(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """A^T B, counted as one matrix product."""
    counter = current_counter()
    if counter is not None:
        counter.record_matmul(A.shape[-1], A.shape[-2], _columns(B))
    return A.transpose(-1, -2) @ B


def logdet_from_cholesky(L: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(L.diagonal()).sum()


def column_sq_sum(A: torch.Tensor) -> torch.Tensor:
    """(A * A)^T 1, the per-column sum of squares."""
    return (A * A).sum(dim=0)


def check_square(A: torch.Tensor, name: str):
    if A.dim() != 2 or A.shape[0] != A.shape[1]:
        raise ArgumentError(f"{name} must be a square matrix, got shape {tuple(A.shape)}")

"""
Covariance functions with a shared (isotropic) lengthscale.

    SquaredExponential  k(x, x') = s2 * exp(-|x - x'|^2 / (2 l^2))
    Matern32            k(x, x') = s2 * (1 + sqrt(3) r / l) * exp(-sqrt(3) r / l),  r = |x - x'|

Hyperparameters may be python floats or 0-d float64 tensors; tensors keep
their autograd history so the trainer can differentiate through them.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Union

import torch

from gp.errors import ArgumentError
from gp.linalg import as_tensor, scalar_value

Scalar = Union[float, torch.Tensor]

# floor under squared distances before the square root in Matern32; keeps
# gradients finite at coincident points without changing k(x, x)
_SQDIST_FLOOR = 1e-36


class KernelFamily(str, Enum):
    SQUARED_EXPONENTIAL = 'SquaredExponential'
    MATERN32 = 'Matern32'


@dataclass(frozen=True)
class KernelSpec:
    """Covariance-function family with positive hyperparameters"""
    family: KernelFamily
    lengthscale: Scalar = 1.0
    signal_variance: Scalar = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'family', KernelFamily(self.family))
        if not scalar_value(self.lengthscale) > 0:
            raise ArgumentError(f"lengthscale must be positive, got {scalar_value(self.lengthscale)}")
        if not scalar_value(self.signal_variance) > 0:
            raise ArgumentError(f"signal_variance must be positive, got {scalar_value(self.signal_variance)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'family': self.family.value,
            'lengthscale': scalar_value(self.lengthscale),
            'signal_variance': scalar_value(self.signal_variance)
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'KernelSpec':
        return cls(
            family=KernelFamily(data['family']),
            lengthscale=float(data.get('lengthscale', 1.0)),
            signal_variance=float(data.get('signal_variance', 1.0))
        )


def _as_matrix(A, name: str) -> torch.Tensor:
    A = as_tensor(A)
    if A.dim() == 1:
        A = A.unsqueeze(0)
    if A.dim() != 2:
        raise ArgumentError(f"{name} must be a matrix with one input point per row")
    return A


def _squared_distance(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    # difference form keeps K(A, A) exactly symmetric and K(A, B) = K(B, A)^T
    diff = A.unsqueeze(1) - B.unsqueeze(0)
    return (diff * diff).sum(dim=-1)


def _from_squared_distance(spec: KernelSpec, sqdist: torch.Tensor) -> torch.Tensor:
    ell = as_tensor(spec.lengthscale)
    s2 = as_tensor(spec.signal_variance)
    if spec.family is KernelFamily.SQUARED_EXPONENTIAL:
        return s2 * torch.exp(-0.5 * sqdist / (ell * ell))
    scaled = math.sqrt(3.0) * torch.sqrt(sqdist.clamp_min(_SQDIST_FLOOR)) / ell
    return s2 * (1.0 + scaled) * torch.exp(-scaled)


def kernel_matrix(spec: KernelSpec, A, B) -> torch.Tensor:
    """|A| x |B| matrix of kernel evaluations"""
    A = _as_matrix(A, 'A')
    B = _as_matrix(B, 'B')
    if A.shape[1] != B.shape[1]:
        raise ArgumentError(f"input dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return _from_squared_distance(spec, _squared_distance(A, B))


def kernel_eval(spec: KernelSpec, x, x_prime) -> torch.Tensor:
    x = as_tensor(x).reshape(-1)
    x_prime = as_tensor(x_prime).reshape(-1)
    if x.shape[0] != x_prime.shape[0]:
        raise ArgumentError(f"point dimension mismatch: {x.shape[0]} vs {x_prime.shape[0]}")
    return kernel_matrix(spec, x.unsqueeze(0), x_prime.unsqueeze(0))[0, 0]


def kernel_diag(spec: KernelSpec, A) -> torch.Tensor:
    """Diagonal of K(A, A) without forming the matrix; both families are stationary"""
    A = _as_matrix(A, 'A')
    return as_tensor(spec.signal_variance) * torch.ones(A.shape[0], dtype=A.dtype)

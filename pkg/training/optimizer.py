"""
Gradient provider, finite-difference audit and Adam (ascent).

Objectives are closures from the free parameter vector to a 0-d tensor; torch
autograd differentiates through the Cholesky pipeline with the jitter held
constant.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import torch

from gp.errors import ArgumentError, NumericalError
from gp.linalg import as_tensor
from training.parameters import ParamVector

logger = logging.getLogger(__name__)

Objective = Callable[[torch.Tensor], torch.Tensor]

FD_STEP = 1e-5
FD_FLOOR = 1e-8


def _non_finite_block(params: Optional[ParamVector], grad: torch.Tensor) -> Optional[str]:
    bad = (~torch.isfinite(grad)).nonzero()
    if params is None or bad.numel() == 0:
        return None
    return params.block_of(int(bad[0, 0]))


def value_and_gradient(objective: Objective, params) -> Tuple[torch.Tensor, torch.Tensor]:
    """Objective value and its gradient in unconstrained coordinates"""
    vector = params if isinstance(params, ParamVector) else None
    start = params.values if vector is not None else as_tensor(params)
    free = start.detach().clone().requires_grad_(True)
    value = objective(free)
    if not bool(torch.isfinite(value)):
        raise NumericalError(f"objective is not finite ({float(value)})")
    (grad,) = torch.autograd.grad(value, free, allow_unused=False)
    if not bool(torch.isfinite(grad).all()):
        block = _non_finite_block(vector, grad)
        raise NumericalError(f"non-finite gradient in block '{block}'", block=block)
    return value.detach(), grad.detach()


def gradient(objective: Objective, params) -> torch.Tensor:
    return value_and_gradient(objective, params)[1]


def finite_diff_audit(objective: Objective, params, step: float = FD_STEP) -> float:
    """
    Worst relative error between central differences and gradient(); the step
    for coordinate i is step * max(1, |p_i|) and the denominator max(|g_i|, 1e-8).
    """
    if not step > 0:
        raise ArgumentError(f"finite-difference step must be positive, got {step}")
    p = (params.values if isinstance(params, ParamVector) else as_tensor(params)).detach().clone()
    grad = gradient(objective, params)
    worst = 0.0
    with torch.no_grad():
        for i in range(p.shape[0]):
            h = step * max(1.0, abs(float(p[i])))
            up = p.clone()
            down = p.clone()
            up[i] += h
            down[i] -= h
            estimate = (float(objective(up)) - float(objective(down))) / (2.0 * h)
            error = abs(estimate - float(grad[i])) / max(abs(float(grad[i])), FD_FLOOR)
            worst = max(worst, error)
    logger.debug(f"finite-difference audit over {p.shape[0]} coordinates: worst relative error {worst:.2e}")
    return worst


@dataclass
class AdamState:
    params: torch.Tensor
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: torch.Tensor = field(default=None)
    v: torch.Tensor = field(default=None)

    def __post_init__(self):
        self.params = as_tensor(self.params).detach().clone()
        if self.m is None:
            self.m = torch.zeros_like(self.params)
        if self.v is None:
            self.v = torch.zeros_like(self.params)


def adam_step(state: AdamState, grad: torch.Tensor, iteration: int,
              learning_rate: Optional[float] = None) -> AdamState:
    """Bias-corrected Adam moving up the gradient (the bound is maximised)"""
    if iteration < 1:
        raise ArgumentError(f"Adam iterations are counted from 1, got {iteration}")
    lr = state.learning_rate if learning_rate is None else learning_rate
    grad = as_tensor(grad)
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    bc1 = 1.0 - state.beta1 ** iteration
    bc2 = 1.0 - state.beta2 ** iteration
    denom = torch.sqrt(v / bc2) + state.epsilon
    params = state.params + (lr / bc1) * m / denom
    return AdamState(params, state.learning_rate, state.beta1, state.beta2, state.epsilon, m, v)

"""
Flattening of model states into one unconstrained parameter vector.

Each block carries a transform tag:
    identity       means and inducing locations
    tril_softplus  lower-triangular scale factors; the diagonal passes through softplus
    log            positive scalars (lengthscale, signal variance, noise variance)
Free-vector values are unconstrained, so positivity holds after any update.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Tuple

import torch
import torch.nn.functional as nnf

from gp.deepgp import DeepState, LayerState
from gp.errors import ArgumentError
from gp.kernels import KernelSpec
from gp.linalg import DTYPE, as_tensor
from gp.solvegp import OrthogonalMode, SolveGpState
from gp.svgp import SvgpState
from gp.variational import CholeskyGaussian, GaussianLikelihood

# softplus(x) == x to double precision beyond this point
_SOFTPLUS_LINEAR = 30.0


class Transform(str, Enum):
    IDENTITY = 'identity'
    TRIL_SOFTPLUS = 'tril_softplus'
    LOG = 'log'


def softplus_inverse(y: torch.Tensor) -> torch.Tensor:
    y = as_tensor(y)
    if bool((y <= 0).any()):
        raise ArgumentError("softplus_inverse needs strictly positive values")
    return torch.where(y > _SOFTPLUS_LINEAR, y, y + torch.log(-torch.expm1(-y)))


@dataclass(frozen=True)
class ParamBlock:
    name: str
    transform: Transform
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        if self.transform is Transform.TRIL_SOFTPLUS:
            n = self.shape[0]
            return n * (n + 1) // 2
        return math.prod(self.shape)

    def to_free(self, value: torch.Tensor) -> torch.Tensor:
        value = as_tensor(value)
        if self.transform is Transform.LOG:
            return torch.log(value).reshape(-1)
        if self.transform is Transform.TRIL_SOFTPLUS:
            n = self.shape[0]
            rows, cols = torch.tril_indices(n, n)
            free = value.detach().clone()
            idx = torch.arange(n)
            free[idx, idx] = softplus_inverse(value.diagonal())
            return free[rows, cols]
        return value.reshape(-1)

    def from_free(self, free: torch.Tensor) -> torch.Tensor:
        if self.transform is Transform.LOG:
            return torch.exp(free).reshape(self.shape)
        if self.transform is Transform.TRIL_SOFTPLUS:
            n = self.shape[0]
            if n == 0:
                return free.new_zeros((0, 0))
            rows, cols = torch.tril_indices(n, n)
            lower = free.new_zeros((n, n)).index_put((rows, cols), free)
            diag = nnf.softplus(lower.diagonal())
            return torch.tril(lower, diagonal=-1) + torch.diag_embed(diag)
        return free.reshape(self.shape)


@dataclass
class ParamVector:
    """Blocks in a fixed order and the concatenated free values"""
    blocks: List[ParamBlock]
    values: torch.Tensor

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_entries(cls, entries: List[Tuple[str, Transform, torch.Tensor]]) -> 'ParamVector':
        blocks, parts = [], []
        for name, transform, value in entries:
            value = as_tensor(value).detach()
            block = ParamBlock(name, Transform(transform), tuple(value.shape))
            blocks.append(block)
            parts.append(block.to_free(value))
        values = torch.cat(parts) if parts else torch.zeros(0, dtype=DTYPE)
        return cls(blocks, values.detach().clone())

    def split(self, free: torch.Tensor = None) -> Dict[str, torch.Tensor]:
        """Constrained value of every block, differentiable in `free`"""
        free = self.values if free is None else free
        out, offset = {}, 0
        for block in self.blocks:
            out[block.name] = block.from_free(free[offset:offset + block.size])
            offset += block.size
        return out

    def block_of(self, index: int) -> str:
        offset = 0
        for block in self.blocks:
            if index < offset + block.size:
                return block.name
            offset += block.size
        raise ArgumentError(f"index {index} outside a parameter vector of size {self.size}")

    def with_values(self, values: torch.Tensor) -> 'ParamVector':
        return ParamVector(self.blocks, values.detach().clone())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'blocks': [{'name': b.name, 'transform': b.transform.value, 'shape': list(b.shape)}
                       for b in self.blocks],
            'values': [float(v) for v in self.values],
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> 'ParamVector':
        blocks = [ParamBlock(b['name'], Transform(b['transform']), tuple(b['shape'])) for b in document['blocks']]
        values = torch.tensor(document['values'], dtype=DTYPE)
        expected = sum(b.size for b in blocks)
        if values.shape[0] != expected:
            raise ArgumentError(f"parameter vector holds {values.shape[0]} values, blocks need {expected}")
        return cls(blocks, values)


def _factor_entries(prefix: str, q: CholeskyGaussian, with_scale: bool = True):
    entries = [(f'{prefix}.mean', Transform.IDENTITY, q.mean)]
    if with_scale:
        entries.append((f'{prefix}.scale', Transform.TRIL_SOFTPLUS, q.scale))
    return entries


def _hyper_entries(prefix: str, kernel: KernelSpec):
    return [
        (f'{prefix}lengthscale', Transform.LOG, as_tensor(kernel.lengthscale)),
        (f'{prefix}signal_variance', Transform.LOG, as_tensor(kernel.signal_variance)),
    ]


def _layer_entries(prefix: str, layer: LayerState):
    entries = [(f'{prefix}Z', Transform.IDENTITY, layer.Z), (f'{prefix}O', Transform.IDENTITY, layer.O)]
    frozen = layer.mode is OrthogonalMode.ODVGP_FROZEN
    for c in range(layer.output_width):
        entries += _factor_entries(f'{prefix}q_u[{c}]', layer.q_u[c])
        entries += _factor_entries(f'{prefix}q_v[{c}]', layer.q_v[c], with_scale=not frozen)
    return entries + _hyper_entries(f'{prefix}kernel.', layer.kernel)


def model_entries(model) -> List[Tuple[str, Transform, torch.Tensor]]:
    """Ordered (name, transform, value) triples for every trainable quantity"""
    noise = [('likelihood.noise_variance', Transform.LOG, as_tensor(model.likelihood.noise_variance))]
    if isinstance(model, SvgpState):
        return ([('Z', Transform.IDENTITY, model.Z)] + _factor_entries('q_u', model.q_u)
                + _hyper_entries('kernel.', model.kernel) + noise)
    if isinstance(model, SolveGpState):
        frozen = model.mode is OrthogonalMode.ODVGP_FROZEN
        return ([('Z', Transform.IDENTITY, model.Z), ('O', Transform.IDENTITY, model.O)]
                + _factor_entries('q_u', model.q_u) + _factor_entries('q_v', model.q_v, with_scale=not frozen)
                + _hyper_entries('kernel.', model.kernel) + noise)
    if isinstance(model, DeepState):
        entries = []
        for index, layer in enumerate(model.layers):
            entries += _layer_entries(f'layers[{index}].', layer)
        return entries + noise
    raise ArgumentError(f"cannot parameterize a model of type {type(model).__name__}")


def flatten_model(model) -> ParamVector:
    return ParamVector.from_entries(model_entries(model))


def _kernel(template: KernelSpec, values: Dict[str, torch.Tensor], prefix: str) -> KernelSpec:
    return KernelSpec(template.family, values[f'{prefix}lengthscale'], values[f'{prefix}signal_variance'])


def _factor(values: Dict[str, torch.Tensor], prefix: str, frozen_scale: torch.Tensor = None) -> CholeskyGaussian:
    scale = values.get(f'{prefix}.scale', frozen_scale)
    return CholeskyGaussian(values[f'{prefix}.mean'], scale)


def rebuild_model(template, params: ParamVector, free: torch.Tensor = None):
    """A model like `template` whose trainable quantities come from `free`"""
    values = params.split(free)
    likelihood = GaussianLikelihood(values['likelihood.noise_variance'])
    if isinstance(template, SvgpState):
        return SvgpState(values['Z'], _factor(values, 'q_u'), _kernel(template.kernel, values, 'kernel.'),
                         likelihood, template.whitened)
    if isinstance(template, SolveGpState):
        return SolveGpState(values['Z'], values['O'], _factor(values, 'q_u'),
                            _factor(values, 'q_v', template.q_v.scale.detach()),
                            _kernel(template.kernel, values, 'kernel.'), likelihood, template.mode, template.whitened)
    if isinstance(template, DeepState):
        layers = []
        for index, layer in enumerate(template.layers):
            prefix = f'layers[{index}].'
            layers.append(LayerState(
                kernel=_kernel(layer.kernel, values, f'{prefix}kernel.'),
                Z=values[f'{prefix}Z'],
                O=values[f'{prefix}O'],
                q_u=[_factor(values, f'{prefix}q_u[{c}]') for c in range(layer.output_width)],
                q_v=[_factor(values, f'{prefix}q_v[{c}]', layer.q_v[c].scale.detach())
                     for c in range(layer.output_width)],
                whitened=layer.whitened,
                mode=layer.mode,
            ))
        return DeepState(layers, likelihood)
    raise ArgumentError(f"cannot rebuild a model of type {type(template).__name__}")

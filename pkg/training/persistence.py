"""
model.json: every parameter in constrained form, the transform of each block and
the run configuration that produced it. Floats are written with Python's
shortest round-trip repr, so a reload reproduces bounds and predictions bit for bit.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from gp.deepgp import DeepState, LayerState
from gp.errors import ArgumentError
from gp.kernels import KernelSpec
from gp.linalg import DTYPE, scalar_value
from gp.solvegp import OrthogonalMode, SolveGpState
from gp.svgp import SvgpState
from gp.variational import CholeskyGaussian, GaussianLikelihood
from training.parameters import flatten_model
from training.trainer import Model, model_kind

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'solvegp-model'
MODEL_VERSION = 1


def _factor_to_dict(q: CholeskyGaussian) -> Dict[str, Any]:
    return {'mean': q.mean.detach().tolist(), 'scale': q.scale.detach().tolist()}


def _factor_from_dict(document: Dict[str, Any]) -> CholeskyGaussian:
    mean = torch.tensor(document['mean'], dtype=DTYPE).reshape(-1)
    n = mean.shape[0]
    scale = torch.tensor(document['scale'], dtype=DTYPE).reshape(n, n)
    factor = CholeskyGaussian(mean, scale)
    factor.validate()
    return factor


def _layer_to_dict(kernel: KernelSpec, Z, O, q_u, q_v, whitened: bool, mode: OrthogonalMode) -> Dict[str, Any]:
    return {
        'kernel': kernel.to_dict(),
        'Z': Z.detach().tolist(),
        'O': O.detach().tolist() if O is not None else None,
        'q_u': [_factor_to_dict(q) for q in q_u],
        'q_v': [_factor_to_dict(q) for q in q_v],
        'whitened': whitened,
        'mode': mode.value,
    }


def model_to_dict(model: Model, run_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    if isinstance(model, SvgpState):
        layers = [_layer_to_dict(model.kernel, model.Z, None, [model.q_u], [], model.whitened, OrthogonalMode.FREE)]
    elif isinstance(model, SolveGpState):
        layers = [_layer_to_dict(model.kernel, model.Z, model.O, [model.q_u], [model.q_v],
                                 model.whitened, model.mode)]
    elif isinstance(model, DeepState):
        layers = [_layer_to_dict(layer.kernel, layer.Z, layer.O, layer.q_u, layer.q_v, layer.whitened, layer.mode)
                  for layer in model.layers]
    else:
        raise ArgumentError(f"cannot serialize a model of type {type(model).__name__}")
    return {
        'format': MODEL_FORMAT,
        'version': MODEL_VERSION,
        'model': model_kind(model),
        'likelihood': {'noise_variance': scalar_value(model.likelihood.noise_variance)},
        'layers': layers,
        'transforms': flatten_model(model).to_dict()['blocks'],
        'run_config': run_config,
    }


def _input_matrix(rows, width: int) -> torch.Tensor:
    return torch.tensor(rows, dtype=DTYPE).reshape(-1, width)


def model_from_dict(document: Dict[str, Any]) -> Model:
    if document.get('format') != MODEL_FORMAT:
        raise ArgumentError(f"not a model file (format {document.get('format')!r})")
    kind = document['model']
    likelihood = GaussianLikelihood(float(document['likelihood']['noise_variance']))
    layers = document['layers']

    def layer_parts(layer):
        Z = torch.tensor(layer['Z'], dtype=DTYPE)
        O = _input_matrix(layer['O'] or [], Z.shape[1])
        return (KernelSpec.from_dict(layer['kernel']), Z, O,
                [_factor_from_dict(q) for q in layer['q_u']], [_factor_from_dict(q) for q in layer['q_v']],
                bool(layer['whitened']), OrthogonalMode(layer['mode']))

    if kind == 'svgp':
        kernel, Z, _, q_u, _, whitened, _ = layer_parts(layers[0])
        return SvgpState(Z, q_u[0], kernel, likelihood, whitened)
    if kind in ('solvegp', 'odvgp'):
        kernel, Z, O, q_u, q_v, whitened, mode = layer_parts(layers[0])
        return SolveGpState(Z, O, q_u[0], q_v[0], kernel, likelihood, mode, whitened)
    if kind == 'deep_solvegp':
        built = []
        for layer in layers:
            kernel, Z, O, q_u, q_v, whitened, mode = layer_parts(layer)
            built.append(LayerState(kernel, Z, O, q_u, q_v, whitened, mode))
        return DeepState(built, likelihood)
    raise ArgumentError(f"unknown model '{kind}'")


def save_model(path, model: Model, run_config: Optional[Dict[str, Any]] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model, run_config), indent=1), encoding='utf-8')
    logger.info(f"Saved {model_kind(model)} model to {path}")


def load_model(path):
    """Returns (model, run_config dictionary or None)"""
    document = json.loads(Path(path).read_text(encoding='utf-8'))
    return model_from_dict(document), document.get('run_config')

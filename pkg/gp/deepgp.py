"""
Doubly-stochastic deep SOLVE-GP (fully-connected layers, desk scale).

Each layer holds `output_width` independent GPs that share one kernel and one
pair of inducing sets (Z, O) living in the previous layer's output space.
Samples are propagated point-by-point and channel-by-channel with the
reparameterization f = mean + sqrt(var) * eps; the last layer's expected
log-likelihood is taken in closed form.

Documented limits: at most 3 layers, width at most 5, M and M2 at most 64.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import torch

from data.data_io import seeded_permutation
from gp.errors import ArgumentError
from gp.kernels import KernelSpec
from gp.linalg import DTYPE, as_tensor
from gp.solvegp import (
    OrthogonalMode,
    SolveGpState,
    build_gram_cache,
    kl_terms,
    marginal_q_f,
    prior_state,
    solvegp_bound,
)
from gp.svgp import check_batch
from gp.variational import CholeskyGaussian, GaussianLikelihood, expected_log_lik_gaussian
from performance.metrics import op_monitor

logger = logging.getLogger(__name__)

MAX_LAYERS = 3
MAX_WIDTH = 5
MAX_INDUCING = 64
VARIANCE_FLOOR = 1e-12


@dataclass
class LayerState:
    """Kernel, inducing sets and one (q_u, q_v) pair per output channel"""
    kernel: KernelSpec
    Z: torch.Tensor
    O: torch.Tensor
    q_u: List[CholeskyGaussian]
    q_v: List[CholeskyGaussian]
    whitened: bool = False
    mode: OrthogonalMode = OrthogonalMode.FREE

    def __post_init__(self):
        self.Z = as_tensor(self.Z)
        self.O = as_tensor(self.O).reshape(-1, self.Z.shape[1])
        if len(self.q_u) != len(self.q_v) or not self.q_u:
            raise ArgumentError("each output channel needs one q_u and one q_v")

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def output_width(self) -> int:
        return len(self.q_u)

    def channel_state(self, channel: int, likelihood: GaussianLikelihood) -> SolveGpState:
        return SolveGpState(self.Z, self.O, self.q_u[channel], self.q_v[channel], self.kernel,
                            likelihood, self.mode, self.whitened)


@dataclass
class LayerSpec:
    """Construction recipe for one layer of DeepState.build"""
    output_width: int = 1
    num_inducing: int = 5
    num_orthogonal: int = 5
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec('SquaredExponential'))


@dataclass
class DeepState:
    layers: List[LayerState]
    likelihood: GaussianLikelihood = field(default_factory=GaussianLikelihood)

    def __post_init__(self):
        if not self.layers:
            raise ArgumentError("a deep model needs at least one layer")
        for index in range(1, len(self.layers)):
            previous, layer = self.layers[index - 1], self.layers[index]
            if layer.input_dim != previous.output_width:
                raise ArgumentError(f"layer {index} expects {layer.input_dim} inputs but layer "
                                    f"{index - 1} has {previous.output_width} outputs")
        if self.layers[-1].output_width != 1:
            raise ArgumentError("the final layer must have a single output channel")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def with_params(self, **changes) -> 'DeepState':
        return replace(self, **changes)

    @classmethod
    def build(cls, layer_specs: Sequence[LayerSpec], X, seed: int,
              likelihood: Optional[GaussianLikelihood] = None, whitened: bool = False) -> 'DeepState':
        """
        Prior initialisation. Z and O of the first layer are disjoint random
        subsets of X; deeper layers reuse the same rows projected onto the
        previous layer's output width (truncated or zero-padded).
        """
        X = as_tensor(X)
        likelihood = likelihood or GaussianLikelihood()
        if len(layer_specs) > MAX_LAYERS:
            logger.warning(f"{len(layer_specs)} layers exceeds the supported depth of {MAX_LAYERS}")
        layers = []
        width = X.shape[1]
        for index, spec in enumerate(layer_specs):
            M, M2 = spec.num_inducing, spec.num_orthogonal
            if M + M2 > X.shape[0]:
                raise ArgumentError(f"layer {index}: M + M2 = {M + M2} exceeds {X.shape[0]} data points")
            if spec.output_width > MAX_WIDTH or max(M, M2) > MAX_INDUCING:
                logger.warning(f"layer {index} is beyond the supported width {MAX_WIDTH} "
                               f"or inducing size {MAX_INDUCING}")
            order = torch.as_tensor(seeded_permutation(X.shape[0], seed + index), dtype=torch.long)
            rows = _project_width(X[order[:M + M2]], width)
            base = prior_state(spec.kernel, rows[:M], rows[M:], likelihood, whitened=whitened)
            layers.append(LayerState(
                kernel=spec.kernel,
                Z=base.Z,
                O=base.O,
                q_u=[base.q_u.detach() for _ in range(spec.output_width)],
                q_v=[base.q_v.detach() for _ in range(spec.output_width)],
                whitened=whitened,
            ))
            width = spec.output_width
        return cls(layers, likelihood)


def _project_width(rows: torch.Tensor, width: int) -> torch.Tensor:
    d = rows.shape[1]
    if width == d:
        return rows.clone()
    if width < d:
        return rows[:, :width].clone()
    return torch.cat([rows, rows.new_zeros((rows.shape[0], width - d))], dim=1)


def _layer_marginals(layer: LayerState, likelihood: GaussianLikelihood,
                     inputs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """N x width means and variances; one gram cache serves every channel"""
    cache = build_gram_cache(layer.channel_state(0, likelihood), inputs)
    means, variances = [], []
    for channel in range(layer.output_width):
        mean, var = marginal_q_f(layer.channel_state(channel, likelihood), cache, inputs)
        means.append(mean)
        variances.append(var)
    return torch.stack(means, dim=1), torch.stack(variances, dim=1)


def _propagate(state: DeepState, X: torch.Tensor, generator: torch.Generator,
               num_layers: int) -> List[torch.Tensor]:
    outputs = []
    h = X
    for layer in state.layers[:num_layers]:
        mean, var = _layer_marginals(layer, state.likelihood, h)
        eps = torch.randn(mean.shape, generator=generator, dtype=DTYPE)
        h = mean + torch.sqrt(var.clamp_min(VARIANCE_FLOOR)) * eps
        outputs.append(h)
    return outputs


def _generator(rng_seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(rng_seed))
    return generator


def deep_forward_sample(state: DeepState, X_batch, rng_seed: int) -> List[torch.Tensor]:
    """Reparameterized samples of every layer's output (N x width each), deterministic in the seed"""
    X = as_tensor(X_batch)
    if X.dim() != 2 or X.shape[1] != state.input_dim:
        raise ArgumentError(f"expected inputs with {state.input_dim} columns, got shape {tuple(X.shape)}")
    return _propagate(state, X, _generator(rng_seed), state.depth)


def deep_kl(state: DeepState) -> torch.Tensor:
    """Plain sum of per-layer, per-channel KL terms"""
    total = torch.zeros((), dtype=DTYPE)
    for layer in state.layers:
        cache = build_gram_cache(layer.channel_state(0, state.likelihood))
        for channel in range(layer.output_width):
            kl_u, kl_v = kl_terms(layer.channel_state(channel, state.likelihood), cache)
            total = total + kl_u + kl_v
    return total


@op_monitor
def deep_solvegp_bound(state: DeepState, X, y, scale: float = 1.0, num_samples: int = 1,
                       rng_seed: int = 0) -> torch.Tensor:
    """Monte-Carlo estimate of the doubly-stochastic bound"""
    if num_samples < 1:
        raise ArgumentError(f"num_samples must be >= 1, got {num_samples}")
    X, y = check_batch(X, y, state.input_dim)
    if state.depth == 1:
        return solvegp_bound(state.layers[0].channel_state(0, state.likelihood), X, y, scale)
    if scale < 1:
        raise ArgumentError(f"minibatch scale must be >= 1, got {scale}")

    kl = deep_kl(state)
    if X.shape[0] == 0:
        return -kl
    generator = _generator(rng_seed)
    final = state.layers[-1]
    data_term = torch.zeros((), dtype=DTYPE)
    for _ in range(num_samples):
        hidden = _propagate(state, X, generator, state.depth - 1)[-1]
        mean, var = _layer_marginals(final, state.likelihood, hidden)
        data_term = data_term + expected_log_lik_gaussian(y, mean[:, 0], var[:, 0], state.likelihood).sum()
    return scale * data_term / num_samples - kl


def deep_predict(state: DeepState, Xstar, num_samples: int = 32,
                 rng_seed: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-sample final-layer marginal means and variances, each num_samples x N*"""
    if num_samples < 1:
        raise ArgumentError(f"num_samples must be >= 1, got {num_samples}")
    Xstar = as_tensor(Xstar)
    generator = _generator(rng_seed)
    final = state.layers[-1]
    means, variances = [], []
    for _ in range(num_samples):
        hidden = Xstar
        if state.depth > 1:
            hidden = _propagate(state, Xstar, generator, state.depth - 1)[-1]
        mean, var = _layer_marginals(final, state.likelihood, hidden)
        means.append(mean[:, 0])
        variances.append(var[:, 0])
    return torch.stack(means), torch.stack(variances)

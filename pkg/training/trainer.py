"""
Training loop: model initialisation, bound dispatch, seeded minibatching,
Adam ascent, per-iteration records and final metrics.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from config.settings import RunConfig, TrainConfig
from data.data_io import Dataset, seeded_permutation
from gp.deepgp import DeepState, LayerSpec, deep_predict, deep_solvegp_bound
from gp.errors import ArgumentError, NumericalError, TrainingAborted
from gp.kernels import kernel_matrix
from gp.linalg import as_tensor, jitter_cholesky, jitter_scope, scalar_value
from gp.solvegp import OrthogonalMode, SolveGpState, build_gram_cache, marginal_q_f, prior_state, solvegp_bound
from gp.svgp import SvgpState, svgp_bound, svgp_marginals
from gp.variational import GaussianLikelihood, prior_factor
from performance.metrics import IterationRecord, MetricsTraceWriter, count_ops
from training.optimizer import AdamState, adam_step, value_and_gradient
from training.parameters import flatten_model, rebuild_model

logger = logging.getLogger(__name__)

Model = Union[SvgpState, SolveGpState, DeepState]

EVAL_SAMPLES = 32
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainResult:
    model: Model
    records: List[IterationRecord] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)


def model_kind(model: Model) -> str:
    if isinstance(model, SvgpState):
        return 'svgp'
    if isinstance(model, SolveGpState):
        return 'odvgp' if model.mode is OrthogonalMode.ODVGP_FROZEN else 'solvegp'
    if isinstance(model, DeepState):
        return 'deep_solvegp'
    raise ArgumentError(f"unknown model type {type(model).__name__}")


def initial_model(config: RunConfig, X_train) -> Model:
    """
    Prior initialisation: inducing sets are disjoint uniform random subsets of
    the training inputs; hyperparameters come from the run configuration.
    """
    X = as_tensor(X_train)
    seed = config.train.seed
    likelihood = GaussianLikelihood(float(config.noise_variance))
    if config.model == 'deep_solvegp':
        specs = [LayerSpec(layer.output_width, layer.num_inducing, layer.num_orthogonal, config.kernel)
                 for layer in config.layers]
        return DeepState.build(specs, X, seed, likelihood, config.whitened)

    M = config.M
    M2 = 0 if config.model == 'svgp' else config.M2
    if M + M2 > X.shape[0]:
        raise ArgumentError(f"M + M2 = {M + M2} exceeds the {X.shape[0]} training points")
    order = torch.as_tensor(seeded_permutation(X.shape[0], seed), dtype=torch.long)
    Z = X[order[:M]].clone()
    if config.model == 'svgp':
        L_u0 = jitter_cholesky(kernel_matrix(config.kernel, Z, Z)).detach()
        return SvgpState(Z, prior_factor(L_u0, config.whitened), config.kernel, likelihood, config.whitened)
    mode = OrthogonalMode.ODVGP_FROZEN if config.model == 'odvgp' else OrthogonalMode.FREE
    return prior_state(config.kernel, Z, X[order[M:M + M2]].clone(), likelihood, mode, config.whitened)


def model_bound(model: Model, X, y, scale: float = 1.0, num_samples: int = 1, rng_seed: int = 0) -> torch.Tensor:
    if isinstance(model, SvgpState):
        return svgp_bound(model, X, y, scale)
    if isinstance(model, SolveGpState):
        return solvegp_bound(model, X, y, scale)
    return deep_solvegp_bound(model, X, y, scale, num_samples, rng_seed)


def predict_marginals(model: Model, X) -> Tuple[torch.Tensor, torch.Tensor]:
    """Latent predictive mean and variance at each row of X (noise excluded)"""
    X = as_tensor(X)
    if isinstance(model, SvgpState):
        return svgp_marginals(model, X)
    if isinstance(model, SolveGpState):
        return marginal_q_f(model, build_gram_cache(model, X), X)
    raise ArgumentError("deep models have no closed-form marginals; use deep_predict")


def evaluate(model: Model, X, y, num_samples: int = EVAL_SAMPLES, rng_seed: int = 0,
             y_scale: float = 1.0) -> Dict[str, float]:
    """
    Mean per-point log N(y_n | mu_n, var_n + s2) and RMSE of the predictive mean.
    Deep models use the Monte-Carlo mixture of final-layer marginals. With
    y_scale != 1 both figures are reported in original target units.
    """
    y = as_tensor(y).reshape(-1)
    if y.shape[0] == 0:
        return {'ll': float('nan'), 'rmse': float('nan')}
    s2 = as_tensor(model.likelihood.noise_variance).detach()
    with torch.no_grad():
        if isinstance(model, DeepState):
            means, variances = deep_predict(model, X, num_samples, rng_seed)
            total = variances + s2
            log_dens = -0.5 * (_LOG_2PI + torch.log(total) + (y - means) ** 2 / total)
            ll = torch.logsumexp(log_dens, dim=0) - math.log(means.shape[0])
            mean = means.mean(dim=0)
        else:
            mean, var = predict_marginals(model, X)
            total = var + s2
            ll = -0.5 * (_LOG_2PI + torch.log(total) + (y - mean) ** 2 / total)
        rmse = torch.sqrt(((y - mean) ** 2).mean())
    return {
        'll': float(ll.mean()) - math.log(y_scale),
        'rmse': float(rmse) * y_scale,
    }


def hyperparameters(model: Model) -> Dict[str, Any]:
    noise = scalar_value(model.likelihood.noise_variance)
    if isinstance(model, DeepState):
        return {
            'layers': [layer.kernel.to_dict() for layer in model.layers],
            'noise_variance': noise,
        }
    return {**model.kernel.to_dict(), 'noise_variance': noise}


def final_metrics(model: Model, dataset: Dataset, config: TrainConfig, original_units: bool = False,
                  iterations_run: int = 0) -> Dict[str, Any]:
    y_scale = dataset.y_std if original_units else 1.0
    train = evaluate(model, dataset.X_train, dataset.y_train, y_scale=y_scale)
    test = evaluate(model, dataset.X_test, dataset.y_test, y_scale=y_scale)
    return {
        'model': model_kind(model),
        'train_ll': train['ll'],
        'test_ll': test['ll'],
        'test_rmse': test['rmse'],
        'units': 'original' if original_units else 'standardized',
        'hyperparameters': hyperparameters(model),
        'iterations': iterations_run,
        'split_sizes': dataset.split_sizes(),
        'adam': {'beta1': config.adam_beta1, 'beta2': config.adam_beta2, 'epsilon': config.adam_epsilon},
    }


def minibatch_stream(n: int, batch_size: int, generator: np.random.Generator) -> Iterator[np.ndarray]:
    """
    Consecutive chunks of exactly batch_size rows cut from an endless stream of
    fresh permutations of range(n). A chunk that runs past the end of one
    permutation continues into the next, so every row is drawn equally often.
    """
    pending = np.zeros(0, dtype=np.int64)
    while True:
        while pending.shape[0] < batch_size:
            pending = np.concatenate([pending, generator.permutation(n)])
        batch, pending = pending[:batch_size], pending[batch_size:]
        yield np.sort(batch)


def batches_per_cycle(n: int, batch_size: int) -> int:
    """Number of batches after which every row has been used the same number of times"""
    return n // math.gcd(n, batch_size)


def _batches(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    return minibatch_stream(n, batch_size, np.random.Generator(np.random.Philox(int(seed))))


def train(model: Model, dataset: Dataset, config: TrainConfig, num_samples: int = 1,
          trace: Optional[MetricsTraceWriter] = None, original_units: bool = False) -> TrainResult:
    """
    Maximise the model's bound with Adam on seeded minibatches (scale N / |B|).
    Raises TrainingAborted carrying the last good model on a numerical failure.
    """
    X = as_tensor(dataset.X_train)
    y = as_tensor(dataset.y_train)
    N = X.shape[0]
    if config.batch_size > N:
        raise ArgumentError(f"train.batch_size {config.batch_size} exceeds the {N} training points")

    params = flatten_model(model)
    adam = AdamState(params.values, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    batches = _batches(N, config.batch_size, config.seed)
    records: List[IterationRecord] = []
    current = model

    with jitter_scope(config.jitter_start):
        for iteration in range(1, config.iterations + 1):
            index = torch.as_tensor(next(batches), dtype=torch.long)
            Xb, yb = X[index], y[index]
            scale = N / index.shape[0]
            lr = config.learning_rate_at(iteration)
            rng_seed = config.seed + iteration

            def objective(free: torch.Tensor) -> torch.Tensor:
                return model_bound(rebuild_model(model, params, free), Xb, yb, scale, num_samples, rng_seed)

            start = time.perf_counter()
            try:
                with count_ops() as counter:
                    value, grad = value_and_gradient(objective, params)
            except NumericalError as e:
                logger.error(f"Numerical failure at iteration {iteration}: {e}")
                raise TrainingAborted(f"training aborted at iteration {iteration}: {e}",
                                      iteration=iteration, last_good_model=current, cause=e)
            wall_ms = (time.perf_counter() - start) * 1000.0

            adam = adam_step(adam, grad, iteration, lr)
            params = params.with_values(adam.params)
            current = rebuild_model(model, params)

            record = IterationRecord(
                iter=iteration,
                bound=float(value),
                wall_ms=None if config.deterministic else wall_ms,
                chol_sizes=counter.chol_sizes(),
                lr=lr,
            )
            records.append(record)
            if trace is not None:
                trace.write(record)
            if iteration % config.log_every == 0 or iteration == config.iterations:
                logger.info(f"iter {iteration}: bound {record.bound:.6f}, lr {lr:.2e}, {wall_ms:.1f}ms")

        metrics = final_metrics(current, dataset, config, original_units, iterations_run=config.iterations)
    logger.info(f"Finished {config.iterations} iterations: test_ll {metrics['test_ll']:.4f}, "
                f"test_rmse {metrics['test_rmse']:.4f}")
    return TrainResult(model=current, records=records, metrics=metrics)

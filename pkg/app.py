"""
Command-line entry point: fit / eval / plot1d.

    python app.py fit config.json [--output-dir DIR]
    python app.py eval runs/demo/model.json [--config other.json] [--exact]
    python app.py plot1d runs/demo/model.json [--grid-min A --grid-max B --grid-points K --output PREFIX]

Exit codes: 0 success, 2 configuration/argument/data error, 3 numerical failure.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import torch

from config.settings import DataConfig, LoggingConfig, RunConfig, load_run_config, validate_run_config
from data.data_io import Dataset, gp_prior_data, load_csv, snelson_like, standardize_and_split
from gp.deepgp import DeepState, deep_predict
from gp.errors import ConfigError, NumericalError, SolveGpError, TrainingAborted
from gp.exact_gp import exact_predictive_log_density
from gp.kernels import KernelSpec
from gp.linalg import as_tensor, jitter_scope
from gp.svgp import SvgpState
from performance.metrics import MetricsTraceWriter
from training.persistence import load_model, save_model
from training.trainer import evaluate, initial_model, predict_marginals, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
BAND_WIDTH = 3.0


def load_dataset(data: DataConfig, kernel: KernelSpec, noise_variance: float) -> Dataset:
    if data.csv is not None:
        raw = load_csv(data.csv, data.target)
    elif data.generator == 'snelson_like':
        raw = snelson_like(data.n, data.seed, data.noise_std)
    else:
        raw = gp_prior_data(kernel, data.n, data.dim, noise_variance, data.seed)
    return standardize_and_split(raw, data.split_seed, data.fractions)


def _report_errors(errors: List[str]):
    for error in errors:
        print(f"error: {error}", file=sys.stderr)


def cmd_fit(config_path, output_dir: Optional[str] = None) -> int:
    try:
        config = load_run_config(config_path)
    except ConfigError as e:
        _report_errors(e.errors)
        return EXIT_USAGE
    out = Path(output_dir or config.output_dir)

    try:
        dataset = load_dataset(config.data, config.kernel, config.noise_variance)
        model = initial_model(config, dataset.X_train)
        with MetricsTraceWriter(out / 'metrics.jsonl') as trace:
            result = train(model, dataset, config.train, config.num_samples, trace, config.data.original_units)
    except TrainingAborted as e:
        save_model(out / 'model.json', e.last_good_model, config.to_dict())
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SolveGpError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    (out / 'final.json').write_text(json.dumps(result.metrics, indent=2), encoding='utf-8')
    save_model(out / 'model.json', result.model, config.to_dict())
    logger.info(f"Wrote metrics.jsonl, final.json and model.json to {out}")
    return EXIT_OK


def _model_input_dim(model) -> int:
    return model.input_dim if isinstance(model, DeepState) else model.Z.shape[1]


def cmd_eval(model_path, config_path: Optional[str] = None, exact: bool = False) -> int:
    """
    Prints {"test_ll", "test_rmse"} for the test split of the model's dataset or of --config.
    With exact, also "exact_test_ll": the exact GP with the model's hyperparameters
    conditioned on the training split.
    """
    try:
        model, stored = load_model(model_path)
        if config_path is not None:
            config = load_run_config(config_path)
        elif stored is not None:
            config = RunConfig.from_dict(stored)
            errors = validate_run_config(config)
            if errors:
                raise ConfigError(errors)
        else:
            raise ConfigError(["config: model file has no dataset recorded; pass --config"])
        dataset = load_dataset(config.data, config.kernel, config.noise_variance)
        if dataset.X.shape[1] != _model_input_dim(model):
            raise ConfigError([f"data: dataset has {dataset.X.shape[1]} features, "
                               f"model expects {_model_input_dim(model)}"])
        y_scale = dataset.y_std if config.data.original_units else 1.0
        with jitter_scope(config.train.jitter_start):
            metrics = evaluate(model, dataset.X_test, dataset.y_test, y_scale=y_scale)
            if exact:
                metrics['exact_ll'] = exact_test_ll(model, dataset, y_scale)
    except ConfigError as e:
        _report_errors(e.errors)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SolveGpError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    report = {'test_ll': metrics['ll'], 'test_rmse': metrics['rmse']}
    if exact:
        report['exact_test_ll'] = metrics['exact_ll']
    print(json.dumps(report))
    return EXIT_OK


def exact_test_ll(model, dataset: Dataset, y_scale: float = 1.0) -> float:
    if isinstance(model, DeepState):
        raise ConfigError(["eval: --exact needs a single-layer model"])
    with torch.no_grad():
        ll = exact_predictive_log_density(model.kernel, dataset.X_train, dataset.y_train,
                                          model.likelihood.noise_variance, dataset.X_test, dataset.y_test)
    return float(ll) - math.log(y_scale)


def inducing_locations(model):
    if isinstance(model, DeepState):
        layer = model.layers[0]
        return layer.Z, layer.O
    if isinstance(model, SvgpState):
        return model.Z, model.Z.new_zeros((0, model.Z.shape[1]))
    return model.Z, model.O


def predictive_band(model, grid: torch.Tensor):
    """Latent mean and standard deviation along a 1D grid (noise excluded)"""
    with torch.no_grad():
        if isinstance(model, DeepState):
            means, variances = deep_predict(model, grid)
            mean = means.mean(dim=0)
            var = (variances + means ** 2).mean(dim=0) - mean ** 2
        else:
            mean, var = predict_marginals(model, grid)
    return mean, torch.sqrt(var.clamp_min(0.0))


def _default_grid(model) -> tuple:
    Z, O = inducing_locations(model)
    points = torch.cat([Z, O]).reshape(-1)
    lo, hi = float(points.min()), float(points.max())
    pad = 0.5 * max(hi - lo, 1.0)
    return lo - pad, hi + pad


def cmd_plot1d(model_path, grid_min: Optional[float] = None, grid_max: Optional[float] = None,
               grid_points: int = 200, output: str = 'plot1d') -> int:
    """Writes <output>.csv (x,mean,lo,hi at +-3 std) and <output>_inducing.csv (kind,x)"""
    try:
        model, _ = load_model(model_path)
        if _model_input_dim(model) != 1:
            raise ConfigError([f"model: plot1d needs a 1D model, this one has {_model_input_dim(model)} inputs"])
        if grid_points < 1:
            raise ConfigError(["grid-points: must be at least 1"])
        default_lo, default_hi = _default_grid(model)
        lo = default_lo if grid_min is None else grid_min
        hi = default_hi if grid_max is None else grid_max
        grid = as_tensor(np.linspace(lo, hi, grid_points)).reshape(-1, 1)
        mean, std = predictive_band(model, grid)
    except ConfigError as e:
        _report_errors(e.errors)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SolveGpError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    prefix = Path(output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    band = pd.DataFrame({
        'x': [repr(float(v)) for v in grid[:, 0]],
        'mean': [repr(float(v)) for v in mean],
        'lo': [repr(float(v)) for v in mean - BAND_WIDTH * std],
        'hi': [repr(float(v)) for v in mean + BAND_WIDTH * std],
    })
    band.to_csv(f'{prefix}.csv', index=False)
    Z, O = inducing_locations(model)
    inducing = pd.DataFrame({
        'kind': ['Z'] * Z.shape[0] + ['O'] * O.shape[0],
        'x': [repr(float(v)) for v in torch.cat([Z, O]).reshape(-1)],
    })
    inducing.to_csv(f'{prefix}_inducing.csv', index=False)
    logger.info(f"Wrote {grid_points} grid points to {prefix}.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='solvegp', description='Sparse orthogonal variational GP trainer')
    parser.add_argument('--log-level', default=None, help='overrides SOLVEGP_LOG_LEVEL')
    commands = parser.add_subparsers(dest='command', required=True)

    fit = commands.add_parser('fit', help='train a model from a JSON run configuration')
    fit.add_argument('config')
    fit.add_argument('--output-dir', default=None)

    evaluate_cmd = commands.add_parser('eval', help='test metrics of a saved model')
    evaluate_cmd.add_argument('model')
    evaluate_cmd.add_argument('--config', default=None)
    evaluate_cmd.add_argument('--exact', action='store_true', help='also report the exact GP test log-likelihood')

    plot = commands.add_parser('plot1d', help='predictive band of a 1D model on a grid')
    plot.add_argument('model')
    plot.add_argument('--grid-min', type=float, default=None)
    plot.add_argument('--grid-max', type=float, default=None)
    plot.add_argument('--grid-points', type=int, default=200)
    plot.add_argument('--output', default='plot1d')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging_config = LoggingConfig.from_environment()
    if args.log_level:
        logging_config.level = args.log_level.upper()
    logging_config.apply()

    if args.command == 'fit':
        return cmd_fit(args.config, args.output_dir)
    if args.command == 'eval':
        return cmd_eval(args.model, args.config, args.exact)
    return cmd_plot1d(args.model, args.grid_min, args.grid_max, args.grid_points, args.output)


if __name__ == '__main__':
    sys.exit(main())

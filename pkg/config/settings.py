# Run Configuration for the SOLVE-GP trainer
# Dataclass settings loaded from one JSON document, logging from the environment

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin

from gp.errors import ConfigError
from gp.kernels import KernelFamily, KernelSpec
from gp.linalg import JITTER_START

MODELS = ('svgp', 'solvegp', 'odvgp', 'deep_solvegp')
GENERATORS = ('snelson_like', 'gp_prior')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

_SCALAR_TYPES = {
    bool: ((bool,), 'true or false'),
    int: ((int,), 'an integer'),
    float: ((int, float), 'a number'),
    str: ((str,), 'a string'),
}


@dataclass
class TrainConfig:
    """Optimizer and loop settings; Adam defaults are reported in every metrics file"""
    learning_rate: float = 0.01
    iterations: int = 10000
    batch_size: int = 20
    seed: int = 0
    anneal: Optional[Tuple[float, int]] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    jitter_start: float = JITTER_START
    deterministic: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.anneal is not None:
            self.anneal = (float(self.anneal[0]), int(self.anneal[1]))

    def learning_rate_at(self, iteration: int) -> float:
        """Step annealing: lr * factor ** floor((iteration - 1) / every_k)"""
        if self.anneal is None:
            return self.learning_rate
        factor, every = self.anneal
        return self.learning_rate * factor ** ((iteration - 1) // every)


@dataclass
class DataConfig:
    """Either a CSV file with a target column or a named generator"""
    csv: Optional[str] = None
    target: str = 'y'
    generator: Optional[str] = None
    n: int = 100
    dim: int = 1
    seed: int = 0
    noise_std: float = 0.3
    fractions: Tuple[float, ...] = (0.8, 0.2)
    split_seed: int = 0
    original_units: bool = False

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)


@dataclass
class LayerConfig:
    output_width: int = 1
    num_inducing: int = 5
    num_orthogonal: int = 5


@dataclass
class RunConfig:
    model: str = 'solvegp'
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(KernelFamily.SQUARED_EXPONENTIAL))
    noise_variance: float = 0.1
    M: int = 5
    M2: int = 5
    whitened: bool = False
    layers: List[LayerConfig] = field(default_factory=list)
    num_samples: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = 'runs/latest'

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> 'RunConfig':
        """Build from a parsed document; unknown keys at any level are errors"""
        errors: List[str] = []
        if not isinstance(document, dict):
            raise ConfigError(["config: expected a JSON object at the top level"])
        top = _take(cls, document, '', errors, skip=('kernel', 'layers', 'train', 'data'))

        kernel_doc = document.get('kernel', {})
        kernel = KernelSpec(KernelFamily.SQUARED_EXPONENTIAL)
        if isinstance(kernel_doc, dict):
            unknown = set(kernel_doc) - {'family', 'lengthscale', 'signal_variance'}
            errors.extend(f"kernel.{key}: unknown field" for key in sorted(unknown))
            for key in ('lengthscale', 'signal_variance'):
                problem = _type_problem(float, kernel_doc.get(key, 1.0))
                if problem:
                    errors.append(f"kernel.{key}: {problem}")
            try:
                kernel = KernelSpec.from_dict({'family': 'SquaredExponential', **kernel_doc})
            except (ValueError, TypeError) as e:
                errors.append(f"kernel: {e}")
        else:
            errors.append("kernel: expected an object")

        layers = []
        for index, layer_doc in enumerate(document.get('layers', []) or []):
            prefix = f"layers[{index}]."
            layers.append(_build(LayerConfig, _take(LayerConfig, layer_doc, prefix, errors), prefix, errors))
        train = _build(TrainConfig, _take(TrainConfig, document.get('train', {}), 'train.', errors), 'train.', errors)
        data = _build(DataConfig, _take(DataConfig, document.get('data', {}), 'data.', errors), 'data.', errors)

        if errors:
            raise ConfigError(errors)
        return cls(kernel=kernel, layers=layers, train=train, data=data, **top)

    @classmethod
    def from_file(cls, path) -> 'RunConfig':
        path = Path(path)
        try:
            document = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError([f"config: {path.name} is not valid JSON ({e.msg} at line {e.lineno})"])
        except OSError as e:
            raise ConfigError([f"config: cannot read {path} ({e.strerror})"])
        return cls.from_dict(document)

    def to_dict(self) -> Dict[str, Any]:
        document = asdict(self)
        document['kernel'] = self.kernel.to_dict()
        return document


@dataclass
class LoggingConfig:
    level: str = 'INFO'
    format: str = LOG_FORMAT

    @classmethod
    def from_environment(cls) -> 'LoggingConfig':
        """Load logging configuration from environment variables"""
        return cls(
            level=os.environ.get('SOLVEGP_LOG_LEVEL', 'INFO').upper(),
            format=os.environ.get('SOLVEGP_LOG_FORMAT', LOG_FORMAT)
        )

    def apply(self):
        logging.basicConfig(level=getattr(logging, self.level, logging.INFO), format=self.format, force=True)


def _type_problem(hint, value) -> Optional[str]:
    """Mismatch between a JSON value and a dataclass field annotation, or None"""
    origin = get_origin(hint)
    if origin is Union:
        options = [arg for arg in get_args(hint) if arg is not type(None)]
        return None if value is None else _type_problem(options[0], value)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            return f"expected a list, got {_json_type(value)}"
        return None
    if hint not in _SCALAR_TYPES:
        return None
    accepted, description = _SCALAR_TYPES[hint]
    if (isinstance(value, bool) and hint is not bool) or not isinstance(value, accepted):
        return f"expected {description}, got {_json_type(value)}"
    return None


def _json_type(value) -> str:
    if value is None:
        return 'null'
    if isinstance(value, bool):
        return 'a boolean'
    return {str: 'a string', int: 'an integer', float: 'a number', list: 'a list', dict: 'an object'}.get(
        type(value), type(value).__name__)


def _take(kind, document, prefix: str, errors: List[str], skip: Tuple[str, ...] = ()) -> Dict[str, Any]:
    if not isinstance(document, dict):
        errors.append(f"{prefix.rstrip('.') or 'config'}: expected an object")
        return {}
    known = {f.name: f.type for f in fields(kind)}
    values = {}
    for key, value in document.items():
        if key in skip:
            continue
        if key not in known:
            errors.append(f"{prefix}{key}: unknown field")
            continue
        problem = _type_problem(known[key], value)
        if problem:
            errors.append(f"{prefix}{key}: {problem}")
            continue
        values[key] = value
    return values


def _build(kind, values: Dict[str, Any], prefix: str, errors: List[str]):
    try:
        return kind(**values)
    except (TypeError, ValueError, IndexError) as e:
        errors.append(f"{prefix.rstrip('.')}: {e}")
        return kind()


def validate_run_config(config: RunConfig) -> List[str]:
    """Validate a run configuration; returns every violation, naming the field"""
    errors = []
    train = config.train
    data = config.data

    if config.model not in MODELS:
        errors.append(f"model: unknown model '{config.model}' (expected one of {', '.join(MODELS)})")
    if config.model != 'deep_solvegp' and config.M < 1:
        errors.append("M: at least one inducing point is required")
    if config.M2 < 0:
        errors.append("M2: must be non-negative")
    if config.model == 'odvgp' and config.M2 < 1:
        errors.append("M2: odvgp requires at least one orthogonal inducing point")
    if not config.noise_variance > 0:
        errors.append("noise_variance: must be positive")
    if config.model == 'deep_solvegp':
        if not config.layers:
            errors.append("layers: deep_solvegp requires at least one layer")
        elif config.layers[-1].output_width != 1:
            errors.append(f"layers[{len(config.layers) - 1}].output_width: the final layer must have width 1")
        for index, layer in enumerate(config.layers):
            if layer.output_width < 1 or layer.num_inducing < 1 or layer.num_orthogonal < 0:
                errors.append(f"layers[{index}]: widths and inducing counts must be positive")
        if config.num_samples < 1:
            errors.append("num_samples: must be at least 1")

    if not train.learning_rate > 0:
        errors.append("train.learning_rate: must be positive")
    if train.iterations < 0:
        errors.append("train.iterations: must be non-negative")
    if train.batch_size < 1:
        errors.append("train.batch_size: must be at least 1")
    if not 0 < train.adam_beta1 < 1:
        errors.append("train.adam_beta1: must lie in (0, 1)")
    if not 0 < train.adam_beta2 < 1:
        errors.append("train.adam_beta2: must lie in (0, 1)")
    if not train.adam_epsilon > 0:
        errors.append("train.adam_epsilon: must be positive")
    if not train.jitter_start > 0:
        errors.append("train.jitter_start: must be positive")
    if train.log_every < 1:
        errors.append("train.log_every: must be at least 1")
    if train.anneal is not None and (not train.anneal[0] > 0 or train.anneal[1] < 1):
        errors.append("train.anneal: expected [factor > 0, every_k >= 1]")

    if (data.csv is None) == (data.generator is None):
        errors.append("data: exactly one of 'csv' and 'generator' must be given")
    if data.generator is not None and data.generator not in GENERATORS:
        errors.append(f"data.generator: unknown generator '{data.generator}'")
    if data.generator is not None and data.n < 2:
        errors.append("data.n: generators need at least 2 points")
    if len(data.fractions) not in (2, 3) or abs(sum(data.fractions) - 1.0) > 1e-9:
        errors.append("data.fractions: expected 2 or 3 fractions summing to 1")

    return errors


def load_run_config(path) -> RunConfig:
    """from_file followed by validate_run_config; raises ConfigError on any violation"""
    config = RunConfig.from_file(path)
    errors = validate_run_config(config)
    if errors:
        raise ConfigError(errors)
    return config

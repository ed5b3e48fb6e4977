"""
Dataset ingestion, standardization, seeded splits and synthetic generators.

Randomness comes from numpy's counter-based Philox bit generator; permutations
use Generator.permutation (a Fisher-Yates shuffle), so splits depend only on
the seed and the number of rows.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from gp.errors import ArgumentError, DataFormatError
from gp.kernels import KernelSpec, kernel_matrix
from gp.linalg import as_tensor, jitter_cholesky

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.8, 0.2)
SNELSON_INTERVALS = ((0.0, 2.4), (3.6, 6.0))
SNELSON_NOISE_STD = 0.3
_FRACTION_TOLERANCE = 1e-9


@dataclass
class RawData:
    """Unstandardized table: X holds every non-target column in file order"""
    X: np.ndarray
    y: np.ndarray
    feature_names: List[str]
    target_name: str = 'y'

    @property
    def num_points(self) -> int:
        return self.X.shape[0]


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    feature_names: List[str] = field(default_factory=list)

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train]

    @property
    def X_test(self) -> np.ndarray:
        return self.X[self.test]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.test]

    @property
    def X_validation(self) -> np.ndarray:
        return self.X[self.validation]

    @property
    def y_validation(self) -> np.ndarray:
        return self.y[self.validation]

    def split_sizes(self) -> dict:
        return {'train': len(self.train), 'validation': len(self.validation), 'test': len(self.test)}

    def inverse_transform_X(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) * self.x_std + self.x_mean

    def inverse_transform_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.y_std + self.y_mean


def _philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    return _philox(seed).permutation(int(n))


def load_csv(path, target_column: str) -> RawData:
    """
    Read a header-first comma-separated file of decimal reals. Errors report the
    file line (the header is line 1) and the column name.
    """
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    columns = [str(c).strip() for c in frame.columns]
    frame.columns = columns
    if target_column not in columns:
        raise ArgumentError(f"target column '{target_column}' not found in {path.name}; columns are {columns}")

    values = np.empty(frame.shape, dtype=np.float64)
    for j, column in enumerate(columns):
        for i, cell in enumerate(frame[column].tolist()):
            try:
                value = float(cell)
            except (TypeError, ValueError):
                raise DataFormatError(f"{path.name}: cannot parse '{cell}' at row {i + 2}, column \"{column}\"",
                                      row=i + 2, column=column)
            if not math.isfinite(value):
                raise DataFormatError(f"{path.name}: non-finite value at row {i + 2}, column \"{column}\"",
                                      row=i + 2, column=column)
            values[i, j] = value

    target_index = columns.index(target_column)
    feature_names = [c for c in columns if c != target_column]
    X = np.delete(values, target_index, axis=1)
    logger.info(f"Loaded {values.shape[0]} rows with {len(feature_names)} features from {path}")
    return RawData(X=X, y=values[:, target_index].copy(), feature_names=feature_names, target_name=target_column)


def write_csv(path, X, y, feature_names: Optional[Sequence[str]] = None, target_name: str = 'y'):
    """Write with shortest round-trip float formatting so load_csv recovers every bit"""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    names = list(feature_names) if feature_names else [f"x{j + 1}" for j in range(X.shape[1])]
    frame = pd.DataFrame({name: [repr(float(v)) for v in X[:, j]] for j, name in enumerate(names)})
    frame[target_name] = [repr(float(v)) for v in y]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def _split_counts(n: int, fractions: Sequence[float]) -> List[int]:
    counts = [int(round(f * n)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


def standardize_and_split(raw: RawData, seed: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dataset:
    """Seeded shuffle, split, then standardize X and y by training-split statistics"""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) not in (2, 3):
        raise ArgumentError(f"expected (train, test) or (train, validation, test) fractions, got {fractions}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > _FRACTION_TOLERANCE:
        raise ArgumentError(f"split fractions must be non-negative and sum to 1, got {fractions}")

    n = raw.num_points
    counts = _split_counts(n, fractions)
    if min(counts) < 1:
        raise ArgumentError(f"split of {n} points by {fractions} leaves a part with {min(counts)} points")

    order = seeded_permutation(n, seed)
    bounds = np.cumsum([0] + counts)
    parts = [np.sort(order[bounds[k]:bounds[k + 1]]) for k in range(len(counts))]
    train, test = parts[0], parts[-1]
    validation = parts[1] if len(parts) == 3 else np.zeros(0, dtype=np.int64)

    X_train = raw.X[train]
    x_mean = X_train.mean(axis=0)
    x_std = X_train.std(axis=0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    y_mean = float(raw.y[train].mean())
    y_std = float(raw.y[train].std())
    if not y_std > 0:
        y_std = 1.0

    return Dataset(
        X=(raw.X - x_mean) / x_std,
        y=(raw.y - y_mean) / y_std,
        x_mean=x_mean,
        x_std=x_std,
        y_mean=y_mean,
        y_std=y_std,
        train=train,
        test=test,
        validation=validation,
        feature_names=list(raw.feature_names),
    )


def snelson_function(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sin(1.5 * x) + 0.4 * np.cos(4.0 * x)


def snelson_like(n: int, seed: int, noise_std: float = SNELSON_NOISE_STD) -> RawData:
    """1D inputs on two intervals separated by a gap, smooth targets plus Gaussian noise"""
    if n < 2:
        raise ArgumentError(f"snelson_like needs at least 2 points, got {n}")
    generator = _philox(seed)
    (a0, a1), (b0, b1) = SNELSON_INTERVALS
    left = n // 2
    x = np.concatenate([generator.uniform(a0, a1, size=left), generator.uniform(b0, b1, size=n - left)])
    noise = generator.standard_normal(n)
    y = snelson_function(x) + noise_std * noise
    return RawData(X=x.reshape(-1, 1), y=y, feature_names=['x'], target_name='y')


def snelson_gap() -> tuple:
    return SNELSON_INTERVALS[0][1], SNELSON_INTERVALS[1][0]


def gp_prior_sample(kernel: KernelSpec, X, noise_variance: float, seed: int) -> np.ndarray:
    """y = L eps + sigma eps', L the jittered Cholesky factor of K_ff"""
    X = np.asarray(X, dtype=np.float64)
    X = as_tensor(X.reshape(-1, 1) if X.ndim == 1 else X)
    L = jitter_cholesky(kernel_matrix(kernel, X, X)).detach().numpy()
    generator = _philox(seed)
    eps = generator.standard_normal(X.shape[0])
    eps_noise = generator.standard_normal(X.shape[0])
    return L @ eps + math.sqrt(noise_variance) * eps_noise


def gp_prior_data(kernel: KernelSpec, n: int, dim: int, noise_variance: float, seed: int,
                  low: float = -3.0, high: float = 3.0) -> RawData:
    """Inputs uniform on [low, high]^dim, targets drawn by gp_prior_sample"""
    X = _philox(seed).uniform(low, high, size=(n, dim))
    y = gp_prior_sample(kernel, X, noise_variance, seed + 1)
    return RawData(X=X, y=y, feature_names=[f"x{j + 1}" for j in range(dim)], target_name='y')

"""
Operation Counting and Training Metrics Module
Counts cubic-cost linear algebra per bound evaluation and writes training traces
"""

import json
import logging
import time
from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field, asdict
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

logger = logging.getLogger(__name__)


@dataclass
class OpCounter:
    """Cubic-cost operation counts for one evaluation"""
    cholesky: Counter = field(default_factory=Counter)
    triangular_solve: Counter = field(default_factory=Counter)
    matmul: Counter = field(default_factory=Counter)

    def record_cholesky(self, n: int):
        self.cholesky[int(n)] += 1

    def record_solve(self, n: int, k: int):
        """Triangular solve of an n x n factor against k right-hand sides"""
        self.triangular_solve[(int(n), int(k))] += 1

    def record_matmul(self, m: int, k: int, n: int):
        self.matmul[(int(m), int(k), int(n))] += 1

    def merge(self, other: 'OpCounter'):
        self.cholesky.update(other.cholesky)
        self.triangular_solve.update(other.triangular_solve)
        self.matmul.update(other.matmul)

    def reset(self):
        self.cholesky.clear()
        self.triangular_solve.clear()
        self.matmul.clear()

    def chol_sizes(self) -> List[int]:
        """Sizes of every recorded factorization, with multiplicity, ascending"""
        return sorted(self.cholesky.elements())

    def snapshot(self) -> Dict[str, Any]:
        return {
            'chol_sizes': self.chol_sizes(),
            'triangular_solves': sorted([list(k) + [v] for k, v in self.triangular_solve.items()]),
            'matmuls': sorted([list(k) + [v] for k, v in self.matmul.items()]),
        }


@dataclass
class EvaluationMetric:
    """Timing and op census of one monitored call"""
    timestamp: str
    function: str
    wall_ms: float
    chol_sizes: List[int]
    success: bool
    error: Optional[str] = None


@dataclass
class IterationRecord:
    """One line of metrics.jsonl"""
    iter: int
    bound: float
    wall_ms: Optional[float]
    chol_sizes: List[int]
    lr: float


_active_counter: ContextVar[Optional[OpCounter]] = ContextVar('active_op_counter', default=None)
_last_metric: ContextVar[Optional[EvaluationMetric]] = ContextVar('last_evaluation_metric', default=None)


def current_counter() -> Optional[OpCounter]:
    return _active_counter.get()


@contextmanager
def count_ops(counter: Optional[OpCounter] = None) -> Iterator[OpCounter]:
    """Install a counter for the enclosed block; linalg helpers report into it"""
    counter = counter if counter is not None else OpCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def last_evaluation() -> Optional[EvaluationMetric]:
    return _last_metric.get()


def op_monitor(func):
    """Decorator to count operations and time one bound or predictive evaluation"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        parent = current_counter()
        start_time = time.perf_counter()
        success = True
        error = None

        with count_ops() as counter:
            try:
                return func(*args, **kwargs)
            except Exception as e:
                success = False
                error = str(e)
                raise
            finally:
                metric = EvaluationMetric(
                    timestamp=datetime.now().isoformat(),
                    function=func.__name__,
                    wall_ms=(time.perf_counter() - start_time) * 1000.0,
                    chol_sizes=counter.chol_sizes(),
                    success=success,
                    error=error
                )
                _last_metric.set(metric)
                if parent is not None:
                    parent.merge(counter)
                logger.debug(f"{metric.function} took {metric.wall_ms:.2f}ms, cholesky sizes {metric.chol_sizes}")

    return wrapper


class MetricsTraceWriter:
    """Writes iteration records as one JSON object per line"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = None

    def __enter__(self):
        self._handle = self.path.open('w', encoding='utf-8')
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._handle:
            self._handle.close()
            self._handle = None

    def write(self, record: IterationRecord):
        if self._handle is None:
            raise RuntimeError("MetricsTraceWriter used outside its context")
        self._handle.write(json.dumps(asdict(record)) + '\n')

    def write_all(self, records: List[IterationRecord]):
        for record in records:
            self.write(record)


def read_trace(path: Path) -> List[Dict[str, Any]]:
    """Parse a metrics.jsonl file back into dictionaries"""
    with Path(path).open(encoding='utf-8') as handle:
        return [json.loads(line) for line in handle if line.strip()]

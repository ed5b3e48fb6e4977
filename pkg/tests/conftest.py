"""
Pytest configuration and fixtures for the SOLVE-GP test suite.
"""

import json
import os

import numpy as np
import pytest
import torch

from tests.oracles import random_instance, random_solvegp_state, random_svgp_state

# Set test environment variables before any package logging is configured
os.environ.update({
    'SOLVEGP_LOG_LEVEL': 'WARNING',
})

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    """Seeded numpy generator for test data."""
    return np.random.default_rng(20240611)


@pytest.fixture
def instance():
    """Small well-conditioned 1D regression instance with Z and O."""
    return random_instance(seed=3)


@pytest.fixture
def make_instance():
    """Factory for random instances keyed by seed."""
    return random_instance


@pytest.fixture
def solvegp_state(instance):
    """Random unwhitened SOLVE-GP state on the default instance."""
    return random_solvegp_state(instance, seed=3)


@pytest.fixture
def svgp_state(instance):
    """Random unwhitened SVGP state on the default instance."""
    return random_svgp_state(instance, seed=3)


@pytest.fixture
def run_config_document():
    """Minimal valid run configuration on a small synthetic dataset."""
    return {
        'model': 'solvegp',
        'kernel': {'family': 'SquaredExponential', 'lengthscale': 1.0, 'signal_variance': 1.0},
        'noise_variance': 0.1,
        'M': 3,
        'M2': 3,
        'train': {'learning_rate': 0.01, 'iterations': 5, 'batch_size': 10, 'seed': 0, 'log_every': 1},
        'data': {'generator': 'snelson_like', 'n': 40, 'seed': 0, 'split_seed': 0},
    }


@pytest.fixture
def write_config(tmp_path):
    """Write a configuration document and return its path."""

    def _write(document, name='config.json'):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding='utf-8')
        return path

    return _write


@pytest.fixture(autouse=True)
def clean_environment():
    """Clean environment variables after each test."""

    # Store original environment
    original_env = dict(os.environ)

    yield

    # Restore original environment
    os.environ.clear()
    os.environ.update(original_env)

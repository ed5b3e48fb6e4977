"""
Integration tests for the training loop on small synthetic datasets.
"""

from dataclasses import replace

import numpy as np
import pytest
import torch

from config.settings import RunConfig
from data.data_io import snelson_like, standardize_and_split
from gp.errors import ArgumentError, NumericalError, TrainingAborted
from gp.solvegp import solvegp_bound
from training import optimizer, trainer
from training.trainer import (batches_per_cycle, evaluate, final_metrics, initial_model, minibatch_stream, model_kind,
                              train)
from tests.oracles import random_instance, random_solvegp_state

pytestmark = pytest.mark.integration


def small_run(model='solvegp', n=8, fractions=(0.75, 0.25), M=2, M2=2, **train_options):
    dataset = standardize_and_split(snelson_like(n, seed=0), seed=0, fractions=fractions)
    document = {'model': model, 'M': M, 'M2': M2, 'train': {'seed': 0, 'deterministic': True, **train_options}}
    if model == 'deep_solvegp':
        document['layers'] = [{'output_width': 1, 'num_inducing': M, 'num_orthogonal': M2}]
    config = RunConfig.from_dict(document)
    return initial_model(config, dataset.X_train), dataset, config.train


class TestTrainLoop:
    """Test end-to-end optimisation behaviour."""

    def test_zero_iterations_returns_initial_model(self):
        """Test iterations=0 leaves the model and reports initialization metrics."""
        model, dataset, config = small_run(iterations=0, batch_size=6)
        result = train(model, dataset, config)
        assert result.model is model
        assert result.records == []
        assert result.metrics == final_metrics(model, dataset, config)

    def test_full_batch_bound_is_non_decreasing(self):
        """Test full-batch Adam climbs on a 6-point instance up to step noise."""
        model, dataset, config = small_run(iterations=200, batch_size=6, learning_rate=0.01)
        bounds = [record.bound for record in train(model, dataset, config).records]
        assert len(bounds) == 200
        assert all(later >= earlier - 1e-3 for earlier, later in zip(bounds, bounds[1:]))
        assert bounds[-1] > bounds[0]

    def test_deterministic_records(self):
        """Test two runs with the same seed produce identical records."""
        first = train(*small_run(n=20, fractions=(0.8, 0.2), iterations=15, batch_size=4))
        second = train(*small_run(n=20, fractions=(0.8, 0.2), iterations=15, batch_size=4))
        assert first.records == second.records
        assert all(r.wall_ms is None for r in first.records)

    def test_records_carry_census(self):
        """Test every iteration factorizes exactly the M and M2 blocks."""
        result = train(*small_run(n=20, fractions=(0.8, 0.2), M=3, M2=2, iterations=4, batch_size=5))
        assert all(record.chol_sizes == [2, 3] for record in result.records)

    def test_annealed_learning_rate_recorded(self):
        """Test the step schedule shows up in the records."""
        result = train(*small_run(iterations=4, batch_size=6, learning_rate=0.1, anneal=[0.5, 2]))
        assert [r.lr for r in result.records] == pytest.approx([0.1, 0.1, 0.05, 0.05])

    @pytest.mark.parametrize('kind', ['svgp', 'odvgp', 'solvegp', 'deep_solvegp'])
    def test_every_model_trains(self, kind):
        """Test each model family runs and reports finite metrics."""
        result = train(*small_run(model=kind, n=20, fractions=(0.8, 0.2), iterations=5, batch_size=8))
        assert model_kind(result.model) == kind
        assert np.isfinite(result.metrics['test_ll'])
        assert np.isfinite(result.metrics['test_rmse'])
        assert result.metrics['iterations'] == 5

    def test_positive_parameters_stay_positive(self):
        """Test noise and kernel hyperparameters remain positive after large steps."""
        result = train(*small_run(iterations=30, batch_size=6, learning_rate=0.1))
        assert float(result.model.likelihood.noise_variance) > 0
        assert float(result.model.kernel.lengthscale) > 0
        assert float(result.model.kernel.signal_variance) > 0
        assert bool((result.model.q_u.scale.diagonal() > 0).all())

    def test_batch_larger_than_training_set(self):
        """Test a batch bigger than N is rejected."""
        model, dataset, config = small_run(iterations=1, batch_size=7)
        with pytest.raises(ArgumentError, match='batch_size'):
            train(model, dataset, config)

    def test_original_units(self):
        """Test metrics can be reported in the raw target scale."""
        model, dataset, config = small_run(iterations=0, batch_size=6)
        metrics = train(model, dataset, config, original_units=True).metrics
        standardized = evaluate(model, dataset.X_test, dataset.y_test)
        assert metrics['units'] == 'original'
        assert metrics['test_rmse'] == pytest.approx(standardized['rmse'] * dataset.y_std)
        assert metrics['test_ll'] == pytest.approx(standardized['ll'] - np.log(dataset.y_std))


class TestTrainingAborted:
    """Test numerical failures stop training cleanly."""

    def test_abort_carries_last_good_model(self, mocker):
        """Test a failure on the third evaluation keeps the model after step two."""
        model, dataset, config = small_run(iterations=10, batch_size=6)
        reference = train(model, dataset, replace(config, iterations=2))
        real = optimizer.value_and_gradient
        calls = {'n': 0}

        def flaky(objective, params):
            calls['n'] += 1
            if calls['n'] == 3:
                raise NumericalError('Cholesky failed', jitter=1e-4)
            return real(objective, params)

        mocker.patch('training.trainer.value_and_gradient', side_effect=flaky)

        with pytest.raises(TrainingAborted) as excinfo:
            train(model, dataset, config)
        assert excinfo.value.iteration == 3
        assert isinstance(excinfo.value.cause, NumericalError)
        assert torch.equal(excinfo.value.last_good_model.Z, reference.model.Z)


class TestMinibatchEstimator:
    """Test the scaled minibatch bound is unbiased over a full cycle of batches."""

    @pytest.mark.parametrize('seed', range(5))
    @pytest.mark.parametrize('N, batch_size', [(24, 6), (10, 4), (11, 3)])
    def test_cycle_average_equals_full_batch(self, seed, N, batch_size):
        """Test averaging over one cycle of batches gives the full bound, divisible or not."""
        inst = random_instance(seed, N=N, M=3, M2=2, d=2)
        state = random_solvegp_state(inst, seed)
        stream = minibatch_stream(N, batch_size, np.random.Generator(np.random.Philox(seed)))
        batches = [next(stream) for _ in range(batches_per_cycle(N, batch_size))]
        assert all(len(batch) == batch_size for batch in batches)
        counts = np.bincount(np.concatenate(batches), minlength=N)
        assert (counts == counts[0]).all()
        estimates = []
        for batch in batches:
            index = torch.as_tensor(batch, dtype=torch.long)
            estimates.append(float(solvegp_bound(state, inst.X[index], inst.y[index], N / batch_size)))
        full = float(solvegp_bound(state, inst.X, inst.y))
        assert abs(np.mean(estimates) - full) < 1e-10

    def test_cycle_length(self):
        """Test the cycle is N / gcd(N, batch_size) batches."""
        assert batches_per_cycle(10, 4) == 5
        assert batches_per_cycle(24, 6) == 4
        assert batches_per_cycle(7, 7) == 1

    def test_stream_is_seeded(self):
        """Test two streams with the same seed give identical batches."""
        first = minibatch_stream(10, 4, np.random.Generator(np.random.Philox(3)))
        second = minibatch_stream(10, 4, np.random.Generator(np.random.Philox(3)))
        for _ in range(7):
            np.testing.assert_array_equal(next(first), next(second))

    def test_training_batches_keep_their_size(self, mocker):
        """Test every iteration sees batch_size rows scaled by N / batch_size when N is not a multiple."""
        model, dataset, config = small_run(iterations=5, batch_size=4)
        spy = mocker.spy(trainer, 'model_bound')
        train(model, dataset, config)
        N = dataset.X_train.shape[0]
        assert N % 4 != 0
        assert spy.call_count >= 5
        for call in spy.call_args_list:
            X_batch, scale = call.args[1], call.args[3]
            assert X_batch.shape[0] == 4
            assert scale == N / 4

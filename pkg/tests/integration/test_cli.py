"""
Integration tests for the fit / eval / plot1d command line.
"""

import json

import numpy as np
import pandas as pd
import pytest

import app
from config.settings import RunConfig
from gp.errors import NumericalError, TrainingAborted
from gp.exact_gp import exact_predictive_log_density
from performance.metrics import read_trace
from training.persistence import load_model

pytestmark = pytest.mark.integration


@pytest.fixture
def fitted(tmp_path, write_config, run_config_document):
    """Run fit once and return the output directory."""
    out = tmp_path / 'run'
    assert app.main(['fit', str(write_config(run_config_document)), '--output-dir', str(out)]) == 0
    return out


class TestFit:
    """Test the fit command."""

    def test_writes_outputs(self, fitted, run_config_document):
        """Test metrics.jsonl, final.json and model.json are produced."""
        trace = read_trace(fitted / 'metrics.jsonl')
        assert [line['iter'] for line in trace] == [1, 2, 3, 4, 5]
        assert all(line['chol_sizes'] == [3, 3] for line in trace)
        final = json.loads((fitted / 'final.json').read_text(encoding='utf-8'))
        assert final['model'] == 'solvegp'
        assert final['iterations'] == 5
        assert final['split_sizes'] == {'train': 32, 'validation': 0, 'test': 8}
        assert set(final['adam']) == {'beta1', 'beta2', 'epsilon'}
        model, stored = load_model(fitted / 'model.json')
        assert stored['M'] == run_config_document['M']

    def test_unknown_model_exits_two(self, tmp_path, write_config, run_config_document, capsys):
        """Test configuration errors are reported by field with exit code 2."""
        run_config_document['model'] = 'foo'
        code = app.main(['fit', str(write_config(run_config_document)), '--output-dir', str(tmp_path / 'x')])
        assert code == 2
        assert "model: unknown model 'foo'" in capsys.readouterr().err
        assert not (tmp_path / 'x' / 'model.json').exists()

    def test_missing_config_exits_two(self, tmp_path):
        """Test a missing file is a usage error."""
        assert app.main(['fit', str(tmp_path / 'absent.json')]) == 2

    def test_missing_csv_exits_two(self, tmp_path, write_config, run_config_document):
        """Test an unreadable data file is a usage error."""
        run_config_document['data'] = {'csv': str(tmp_path / 'absent.csv'), 'target': 'y'}
        assert app.main(['fit', str(write_config(run_config_document)), '--output-dir', str(tmp_path / 'o')]) == 2

    def test_numerical_abort_exits_three(self, tmp_path, write_config, run_config_document, mocker):
        """Test an aborted run saves the last good model and exits 3."""

        def abort(model, *args, **kwargs):
            raise TrainingAborted('training aborted at iteration 1', iteration=1, last_good_model=model,
                                  cause=NumericalError('Cholesky failed'))

        mocker.patch('app.train', side_effect=abort)
        out = tmp_path / 'aborted'
        assert app.main(['fit', str(write_config(run_config_document)), '--output-dir', str(out)]) == 3
        assert (out / 'model.json').exists()
        assert not (out / 'final.json').exists()


class TestEval:
    """Test the eval command."""

    def test_matches_final_metrics(self, fitted, capsys):
        """Test eval reproduces the test metrics written by fit."""
        capsys.readouterr()
        assert app.main(['eval', str(fitted / 'model.json')]) == 0
        printed = json.loads(capsys.readouterr().out)
        final = json.loads((fitted / 'final.json').read_text(encoding='utf-8'))
        assert printed['test_ll'] == pytest.approx(final['test_ll'], abs=1e-12)
        assert printed['test_rmse'] == pytest.approx(final['test_rmse'], abs=1e-12)

    def test_exact_baseline(self, fitted, capsys):
        """Test --exact adds the exact GP test log-likelihood to the report."""
        capsys.readouterr()
        assert app.main(['eval', str(fitted / 'model.json'), '--exact']) == 0
        printed = json.loads(capsys.readouterr().out)
        assert set(printed) == {'test_ll', 'test_rmse', 'exact_test_ll'}
        assert np.isfinite(printed['exact_test_ll'])

    def test_exact_baseline_matches_oracle(self, fitted):
        """Test the baseline is the dense predictive density with the model's hyperparameters."""
        model, stored = load_model(fitted / 'model.json')
        config = RunConfig.from_dict(stored)
        dataset = app.load_dataset(config.data, config.kernel, config.noise_variance)
        expected = exact_predictive_log_density(model.kernel, dataset.X_train, dataset.y_train,
                                                model.likelihood.noise_variance, dataset.X_test, dataset.y_test)
        assert app.exact_test_ll(model, dataset) == pytest.approx(float(expected), abs=1e-12)

    def test_feature_mismatch_exits_two(self, fitted, write_config, run_config_document):
        """Test evaluating on data of another width is rejected."""
        run_config_document['data'] = {'generator': 'gp_prior', 'n': 30, 'dim': 2, 'seed': 0, 'split_seed': 0}
        path = write_config(run_config_document, name='wide.json')
        assert app.main(['eval', str(fitted / 'model.json'), '--config', str(path)]) == 2


class TestPlot1d:
    """Test the plot1d command."""

    def test_prior_band_width(self, tmp_path, write_config, run_config_document):
        """Test a prior model has zero mean and a band of six prior standard deviations."""
        run_config_document['train']['iterations'] = 0
        run_config_document['kernel']['signal_variance'] = 2.0
        out = tmp_path / 'prior'
        assert app.main(['fit', str(write_config(run_config_document)), '--output-dir', str(out)]) == 0
        prefix = tmp_path / 'plots' / 'prior'
        code = app.main(['plot1d', str(out / 'model.json'), '--grid-min', '-3', '--grid-max', '3',
                         '--grid-points', '25', '--output', str(prefix)])
        assert code == 0
        band = pd.read_csv(f'{prefix}.csv')
        assert list(band.columns) == ['x', 'mean', 'lo', 'hi']
        assert len(band) == 25
        np.testing.assert_allclose(band['mean'], 0.0, atol=1e-6)
        np.testing.assert_allclose(band['hi'] - band['lo'], 6.0 * np.sqrt(2.0), rtol=1e-5)
        inducing = pd.read_csv(f'{prefix}_inducing.csv')
        assert inducing['kind'].tolist() == ['Z'] * 3 + ['O'] * 3

    def test_rejects_multi_dimensional_model(self, tmp_path, write_config, run_config_document, capsys):
        """Test a 2D model exits with code 2."""
        run_config_document['data'] = {'generator': 'gp_prior', 'n': 30, 'dim': 2, 'seed': 0, 'split_seed': 0}
        run_config_document['train']['iterations'] = 0
        out = tmp_path / 'wide'
        assert app.main(['fit', str(write_config(run_config_document)), '--output-dir', str(out)]) == 0
        assert app.main(['plot1d', str(out / 'model.json'), '--output', str(tmp_path / 'p')]) == 2
        assert 'plot1d needs a 1D model' in capsys.readouterr().err

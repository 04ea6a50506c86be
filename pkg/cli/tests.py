"""
Test suite for the cli app.
Covers the ddd_* management commands, config resolution and exit codes.
"""
import json
import os
import shutil
import tempfile
from io import StringIO

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from cli.base import EXIT_DOMAIN, EXIT_IO
from cli.export_utils import dumps, write_outputs
from cli.forms import build_run_config, read_config_file
from panel.datasets import load_panel
from simulation.dgp import CattSpec, DgpConfig, simulate_panel
from simulation.fixtures import toy_panel
from stacked_ddd.exceptions import ConfigError

DGP = {
    'cohorts': [[3, 0.3], [4, 0.3]],
    'never_share': 0.4,
    'eligible_share': {'default': 0.5},
    'catt': {'kind': 'linear', 'a': 1.0, 'b': 0.5},
    'noise_sd': 1.0,
    'n_units': 120,
    'T': 6,
    'seed': 5,
}


class CommandTestCase(SimpleTestCase):
    """Temp directory with a simulated panel CSV."""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)
        self.panel_path = self.path('panel.csv')
        simulate_panel(DgpConfig.from_dict(DGP)).to_csv(self.panel_path)
        self.out = self.path('out')

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)

    def call(self, name, **options):
        stdout = StringIO()
        call_command(name, stdout=stdout, **options)
        return stdout.getvalue()

    def read_json(self, *parts):
        with open(self.path(*parts), encoding='utf-8') as handle:
            return json.load(handle)

    def write_file(self, name, content):
        path = self.path(name)
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(content if isinstance(content, str) else json.dumps(content))
        return path


# =====================
# Config Tests
# =====================

class RunConfigTest(SimpleTestCase):
    """Test flag and config-file resolution."""

    def test_defaults_from_settings(self):
        """Test unset options fall back to the configured defaults."""
        form = build_run_config({})
        self.assertEqual(form.cleaned_data['L'], 2)
        self.assertEqual(form.cleaned_data['rule'], 'never')
        self.assertEqual(form.cleaned_data['formats'], ['json', 'csv'])
        self.assertEqual(form.cleaned_data['out'], '.')

    def test_flags_override_file(self):
        """Test explicit flags win over --config values."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'config.json')
            with open(path, 'w', encoding='utf-8') as handle:
                json.dump({'L': 3, 'K': 1, 'bootstrap-B': 50, 'format': ['json']}, handle)
            form = build_run_config({'K': 2}, path)
        self.assertEqual(form.cleaned_data['L'], 3)
        self.assertEqual(form.cleaned_data['K'], 2)
        self.assertEqual(form.cleaned_data['bootstrap_B'], 50)
        self.assertEqual(form.cleaned_data['formats'], ['json'])

    def test_invalid_values(self):
        """Test out-of-range alpha and unknown rules fail validation."""
        with self.assertRaises(ValidationError):
            build_run_config({'alpha': 1.5})
        with self.assertRaises(ValidationError):
            build_run_config({'rule': 'latest'})
        with self.assertRaises(ValidationError):
            build_run_config({'formats': 'xml'})

    def test_config_file_must_be_object(self):
        """Test a config file holding a list is refused."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'config.json')
            with open(path, 'w', encoding='utf-8') as handle:
                json.dump([1, 2], handle)
            with self.assertRaises(ConfigError):
                read_config_file(path)


class ExportUtilsTest(SimpleTestCase):
    """Test JSON and CSV writers."""

    def test_non_finite_becomes_null(self):
        """Test NaN and infinities serialize as null."""
        data = json.loads(dumps({'a': float('nan'), 'b': [np.float64(np.inf), np.int64(3)], 'c': np.bool_(True)}))
        self.assertEqual(data, {'a': None, 'b': [None, 3], 'c': True})

    def test_write_outputs_respects_formats(self):
        """Test only the requested formats are written."""
        with tempfile.TemporaryDirectory() as tmp:
            paths = write_outputs(tmp, 'x', ['json'], {'a': 1}, pd.DataFrame({'a': [1]}))
            self.assertEqual([os.path.basename(p) for p in paths], ['x.json'])
            self.assertFalse(os.path.exists(os.path.join(tmp, 'x.csv')))


# =====================
# Validate Command Tests
# =====================

class ValidateCommandTest(CommandTestCase):
    """Test ddd_validate."""

    def test_clean_panel(self):
        """Test a clean panel passes and the report is written."""
        output = self.call('ddd_validate', input=self.panel_path, out=self.out)
        self.assertIn('Panel passed validation', output)
        report = self.read_json('out', 'validation_report.json')
        self.assertEqual(report['violations'], [])
        self.assertTrue(os.path.exists(self.path('out', 'validation_report.csv')))
        self.assertTrue(os.path.exists(self.path('out', 'resolved_config.json')))

    def test_empty_cell_fails(self):
        """Test an empty cell exits with status 1 after writing the report."""
        path = self.write_file('bad.csv', (
            'unit,time,outcome,cohort,eligible\n'
            'a,1,0,3,1\na,2,0,3,1\na,3,0,3,1\n'
            'b,1,0,never,1\nb,2,0,never,1\nb,3,0,never,1\n'
            'c,1,0,never,0\nc,2,0,never,0\nc,3,0,never,0\n'
        ))
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_validate', input=path, out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)
        report = self.read_json('out', 'validation_report.json')
        self.assertIn('empty cell (3,0)', report['violations'][0]['message'])

    def test_missing_input_file(self):
        """Test an unreadable input exits with status 2."""
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_validate', input=self.path('nope.csv'), out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_IO)

    def test_input_required(self):
        """Test running without --input exits with status 1."""
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_validate', out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)

    def test_parse_error(self):
        """Test a malformed row exits with status 1."""
        path = self.write_file('bad.csv', 'unit,time,outcome,cohort,eligible\na,x,0,3,1\n')
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_validate', input=path, out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)


# =====================
# Estimate Command Tests
# =====================

class EstimateCommandTest(CommandTestCase):
    """Test ddd_estimate."""

    def test_writes_outputs(self):
        """Test the event study, weights, stack estimates and pre-trend tests are written."""
        self.call('ddd_estimate', input=self.panel_path, L=2, K=2, weights='cohort', bootstrap_B=0, out=self.out)
        for name in ('event_study', 'weights', 'stack_att'):
            self.assertTrue(os.path.exists(self.path('out', f'{name}.json')), name)
            self.assertTrue(os.path.exists(self.path('out', f'{name}.csv')), name)
        study = self.read_json('out', 'event_study.json')
        self.assertIsNone(study['band'])
        self.assertEqual(sorted(study['ci']), ['-2', '0', '1', '2'])
        pretrends = self.read_json('out', 'pretrends.json')
        self.assertEqual(sorted(pretrends['per_stack']), ['3', '4'])
        frame = pd.read_csv(self.path('out', 'event_study.csv'))
        self.assertEqual(list(frame['e']), [-2, 0, 1, 2])

    def test_band_with_bootstrap(self):
        """Test a positive bootstrap count adds the simultaneous band."""
        output = self.call(
            'ddd_estimate', input=self.panel_path, L=1, K=1, bootstrap_B=99, seed=3, formats='json', out=self.out,
        )
        self.assertIn('Simultaneous band critical value', output)
        study = self.read_json('out', 'event_study.json')
        self.assertEqual(study['band']['B'], 99)
        self.assertFalse(os.path.exists(self.path('out', 'event_study.csv')))

    def test_config_replay_reproduces_results(self):
        """Test --config with a resolved config reproduces the run."""
        self.call('ddd_estimate', input=self.panel_path, L=1, K=2, bootstrap_B=49, seed=8, out=self.out)
        first = self.read_json('out', 'event_study.json')
        self.call('ddd_estimate', config=self.path('out', 'resolved_config.json'))
        self.assertEqual(self.read_json('out', 'event_study.json'), first)

    def test_missing_custom_weights(self):
        """Test a missing custom weight file exits with status 2."""
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_estimate', input=self.panel_path, weights=f'custom:{self.path("none.json")}', out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_IO)

    def test_custom_weights(self):
        """Test custom weights from a JSON file are used."""
        path = self.write_file('w.json', {'3': 1.0, '4': 3.0})
        self.call('ddd_estimate', input=self.panel_path, L=1, K=1, weights=f'custom:{path}', bootstrap_B=0, out=self.out)
        weights = self.read_json('out', 'weights.json')
        self.assertAlmostEqual(weights['estimates']['0']['weights_used']['4'], 0.75)

    def test_bad_alpha(self):
        """Test an invalid alpha exits with status 1."""
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_estimate', input=self.panel_path, alpha=2.0, out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)

    def test_infeasible_error_mode(self):
        """Test --on-infeasible error exits with status 1 when a cohort cannot be stacked."""
        cfg = DgpConfig.from_dict({**DGP, 'cohorts': [[3, 0.5], [4, 0.5]], 'never_share': 0.0})
        path = self.path('no_never.csv')
        simulate_panel(cfg).to_csv(path)
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_estimate', input=path, L=1, K=1, on_infeasible='error', bootstrap_B=0, out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)


# =====================
# Decompose Command Tests
# =====================

class DecomposeCommandTest(CommandTestCase):
    """Test ddd_decompose."""

    def test_writes_weights_and_properties(self):
        """Test the decomposition files and identity report."""
        output = self.call('ddd_decompose', input=self.panel_path, L=1, K=1, out=self.out)
        self.assertIn('own_period', output)
        for name in ('aux_weights', 'weight_properties', 'agg_weights', 'implied_estimand'):
            self.assertTrue(os.path.exists(self.path('out', f'{name}.json')), name)
        properties = self.read_json('out', 'weight_properties.json')
        self.assertTrue(properties['passed'])
        implied = self.read_json('out', 'implied_estimand.json')
        for j, value in implied['pooled'].items():
            self.assertAlmostEqual(implied['implied']['alpha'][j], value, places=8)

    def test_stacked_catt(self):
        """Test stacked estimates as CATT inputs under the plain specification."""
        self.call('ddd_decompose', input=self.panel_path, L=1, K=1, spec='plain_3wfe', catt='stacked', out=self.out)
        implied = self.read_json('out', 'implied_estimand.json')
        self.assertEqual(implied['implied']['provenance'], 'stacked')
        self.assertEqual(implied['missing'], [])

    def test_stacked_catt_honors_rule(self):
        """Test the comparison rule reaches the stacked CATT inputs."""
        self.call('ddd_decompose', input=self.panel_path, L=1, K=1, catt='stacked', rule='explicit:4', out=self.out)
        implied = self.read_json('out', 'implied_estimand.json')
        self.assertIsNone(implied['implied'])
        self.assertIn({'g': 4, 'ell': 0}, implied['missing'])
        self.assertEqual(self.read_json('out', 'resolved_config.json')['rule'], 'explicit:4')

    def test_stacked_catt_without_never_treated(self):
        """Test the two-cohort design writes the decomposition and records unidentified effects."""
        path = self.path('toy.csv')
        toy_panel(a=2.0, b=2.0, c=2.0).to_csv(path)
        output = self.call('ddd_decompose', input=path, L=1, K=0, catt='stacked', out=self.out)
        self.assertIn('Cohort 3 has no stacked estimates', output)
        self.assertTrue(os.path.exists(self.path('out', 'aux_weights.json')))
        implied = self.read_json('out', 'implied_estimand.json')
        self.assertAlmostEqual(implied['pooled']['0'], 1.0, places=8)
        self.assertIsNone(implied['implied'])
        self.assertIn({'g': 2, 'ell': 1}, implied['missing'])
        self.assertIn({'g': 3, 'ell': 0}, implied['missing'])

    def test_unknown_spec(self):
        """Test an unknown specification exits with status 1."""
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_decompose', input=self.panel_path, spec='twfe', out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)


# =====================
# Simulate Command Tests
# =====================

class SimulateCommandTest(CommandTestCase):
    """Test ddd_simulate."""

    def test_panel_only(self):
        """Test --reps 0 writes the panel drawn from the seed."""
        dgp = self.write_file('dgp.json', DGP)
        self.call('ddd_simulate', dgp=dgp, reps=0, seed=11, out=self.out)
        written = load_panel(self.path('out', 'panel.csv'))
        expected = simulate_panel(DgpConfig.from_dict({**DGP, 'seed': 11}))
        self.assertTrue(written.equals(expected))
        resolved = self.read_json('out', 'resolved_config.json')
        self.assertEqual(resolved['dgp_config']['seed'], 11)

    def test_monte_carlo(self):
        """Test a short Monte Carlo writes its summary."""
        dgp = self.write_file('dgp.json', DGP)
        self.call('ddd_simulate', dgp=dgp, reps=2, estimators='stacked:cohort,pooled_3wfe:hw_style', L=1, K=1, out=self.out)
        summary = self.read_json('out', 'mc_summary.json')
        self.assertEqual(summary['reps'], 2)
        names = {row['estimator'] for row in summary['summary']}
        self.assertEqual(names, {'stacked:cohort', 'pooled_3wfe:hw_style'})
        self.assertFalse(os.path.exists(self.path('out', 'panel.csv')))

    def test_dgp_required(self):
        """Test running without --dgp exits with status 1."""
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_simulate', out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)

    def test_invalid_dgp(self):
        """Test a DGP whose shares do not sum to one exits with status 1."""
        dgp = self.write_file('dgp.json', {**DGP, 'never_share': 0.9})
        with self.assertRaises(CommandError) as ctx:
            self.call('ddd_simulate', dgp=dgp, out=self.out)
        self.assertEqual(ctx.exception.returncode, EXIT_DOMAIN)

    def test_catt_spec_round_trip(self):
        """Test the resolved DGP config keeps the effect specification."""
        dgp = self.write_file('dgp.json', DGP)
        self.call('ddd_simulate', dgp=dgp, reps=0, out=self.out)
        resolved = self.read_json('out', 'resolved_config.json')
        self.assertEqual(CattSpec.from_dict(resolved['dgp_config']['catt']), CattSpec('linear', a=1.0, b=0.5))

"""
Test suite for the simulation app.
Covers DGP configuration, panel generation, config loading and the Monte Carlo harness.
"""
import json
import os
import tempfile

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, tag

from simulation.dgp import (
    CattSpec,
    DgpConfig,
    TrendSpec,
    simulate_panel,
    true_catt,
    weighted_truth,
)
from simulation.fixtures import toy_config
from simulation.forms import load_dgp_config
from simulation.montecarlo import EstimatorSpec, monte_carlo, true_targets
from stacked_ddd.exceptions import ConfigError, ParameterError, UnknownCohortError


def base_config(**overrides):
    data = dict(
        cohorts=((3, 0.3), (4, 0.3)),
        never_share=0.4,
        eligible_share={'default': 0.5},
        catt=CattSpec('linear', a=1.0, b=0.5),
        noise_sd=1.0,
        n_units=100,
        T=6,
        seed=42,
    )
    data.update(overrides)
    return DgpConfig(**data)


# =====================
# Config Tests
# =====================

class DgpConfigTest(SimpleTestCase):
    """Test DGP config validation and derived quantities."""

    def test_shares_must_sum_to_one(self):
        """Test cohort shares plus never_share must be 1."""
        with self.assertRaises(ConfigError):
            base_config(never_share=0.5)

    def test_cohort_inside_panel(self):
        """Test cohorts must lie in [2, T]."""
        with self.assertRaises(ConfigError):
            base_config(cohorts=((1, 0.3), (4, 0.3)))
        with self.assertRaises(ConfigError):
            base_config(cohorts=((3, 0.3), (7, 0.3)))

    def test_eligible_share_open_interval(self):
        """Test eligible shares must lie strictly inside (0, 1)."""
        with self.assertRaises(ConfigError):
            base_config(eligible_share={'default': 1.0})

    def test_violation_cohort_configured(self):
        """Test the violating cohort must be one of the configured cohorts."""
        with self.assertRaises(ConfigError):
            base_config(violation={'cohort': 5, 'gamma': 1.0})

    def test_unknown_trend_family(self):
        """Test unknown trend families are refused."""
        with self.assertRaises(ConfigError):
            TrendSpec('cubic')

    def test_cell_sizes(self):
        """Test largest-remainder cohort sizes split by eligible share."""
        sizes = base_config().cell_sizes()
        self.assertEqual(sizes[(3, True)], 15)
        self.assertEqual(sizes[(3, False)], 15)
        self.assertEqual(sizes[('never', True)], 20)
        self.assertEqual(sum(sizes.values()), 100)

    def test_cell_sizes_uneven_shares(self):
        """Test rounding keeps the total at n_units."""
        cfg = base_config(cohorts=((3, 1 / 3), (4, 1 / 3)), never_share=1 / 3, n_units=10)
        self.assertEqual(sum(cfg.cell_sizes().values()), 10)

    def test_share_unknown_cohort(self):
        """Test asking for an unconfigured cohort's share raises UnknownCohortError."""
        with self.assertRaises(UnknownCohortError):
            base_config().share(5)

    def test_dict_round_trip(self):
        """Test from_dict(to_dict()) rebuilds the same config."""
        cfg = base_config(
            group_trend=TrendSpec('linear', by={'3': {'b': 1.0}}),
            violation={'cohort': 4, 'gamma': 0.2},
        )
        self.assertEqual(DgpConfig.from_dict(cfg.to_dict()).to_dict(), cfg.to_dict())

    def test_with_seed(self):
        """Test with_seed changes only the seed."""
        cfg = base_config()
        other = cfg.with_seed(9)
        self.assertEqual(other.seed, 9)
        self.assertEqual(other.cohorts, cfg.cohorts)


# =====================
# Truth Tests
# =====================

class TrueCattTest(SimpleTestCase):
    """Test configured effects and weighted targets."""

    def test_linear_effect(self):
        """Test catt = a + b * e after treatment and zero before."""
        cfg = base_config()
        self.assertEqual(true_catt(cfg, 3, 2), 2.0)
        self.assertEqual(true_catt(cfg, 3, -2), 0.0)

    def test_table_effect(self):
        """Test table effects default to zero off the table."""
        cfg = toy_config(a=1.0, b=2.0, c=3.0)
        self.assertEqual(true_catt(cfg, 2, 1), 3.0)
        self.assertEqual(true_catt(cfg, 3, 1), 0.0)

    def test_unknown_cohort(self):
        """Test truth for an unconfigured cohort raises UnknownCohortError."""
        with self.assertRaises(UnknownCohortError):
            true_catt(base_config(), 5, 0)

    def test_weighted_truth(self):
        """Test the weighted average of cohort effects."""
        cfg = toy_config(a=1.0, b=3.0)
        self.assertAlmostEqual(weighted_truth(cfg, 0, {2: 1.0, 3: 3.0}), 2.5)

    def test_true_targets(self):
        """Test cohort-size targets use share times eligible share."""
        cfg = toy_config(a=1.0, b=3.0)
        self.assertAlmostEqual(true_targets(cfg, 0, 'stacked:cohort'), 2.0)
        self.assertAlmostEqual(true_targets(cfg, 0, 'stacked:equal'), 2.0)
        with self.assertRaises(ParameterError):
            true_targets(cfg, 0, 'stacked:fwl')


# =====================
# Generation Tests
# =====================

class SimulatePanelTest(SimpleTestCase):
    """Test panel generation."""

    def test_reproducible(self):
        """Test one seed always draws the same panel."""
        cfg = base_config()
        self.assertTrue(simulate_panel(cfg).equals(simulate_panel(cfg)))
        self.assertFalse(simulate_panel(cfg).equals(simulate_panel(cfg.with_seed(43))))

    def test_layout(self):
        """Test ids, time range and cohorts."""
        ds = simulate_panel(base_config())
        self.assertEqual(ds.n_units, 100)
        self.assertEqual(ds.time_range, (1, 6))
        self.assertEqual(ds.cohorts(), [3, 4])
        self.assertTrue(ds.has_never)
        self.assertTrue(ds.is_balanced)
        self.assertEqual(ds.unit_ids[0], 'u00000')

    def test_effect_on_treated_eligible_only(self):
        """Test the effect enters treated-eligible units from g on."""
        cfg = base_config(noise_sd=0.0, catt=CattSpec('constant', c=5.0))
        ds = simulate_panel(cfg)
        diffs = ds.long_differences(4, 2)
        self.assertTrue(np.allclose(diffs[ds.members(3, True)], 5.0))
        self.assertTrue(np.allclose(diffs[ds.members(3, False)], 0.0))
        self.assertTrue(np.allclose(diffs[ds.members(None, True)], 0.0))

    def test_violation_trend(self):
        """Test the violation adds gamma * t to the violating cohort's eligible units."""
        cfg = base_config(noise_sd=0.0, catt=CattSpec('constant', c=0.0), violation={'cohort': 4, 'gamma': 0.5})
        ds = simulate_panel(cfg)
        diffs = ds.long_differences(3, 1)
        self.assertTrue(np.allclose(diffs[ds.members(4, True)], 1.0))
        self.assertTrue(np.allclose(diffs[ds.members(4, False)], 0.0))


# =====================
# Config Loading Tests
# =====================

class LoadDgpConfigTest(SimpleTestCase):
    """Test DGP config files."""

    def write(self, tmp, payload):
        path = os.path.join(tmp, 'dgp.json')
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(payload if isinstance(payload, str) else json.dumps(payload))
        return path

    def test_load_with_seed_override(self):
        """Test a file loads and --seed overrides its seed."""
        with tempfile.TemporaryDirectory() as tmp:
            path = self.write(tmp, {
                'cohorts': [[3, 0.5], [4, 0.5]],
                'catt': 1.5,
                'T': 5,
                'n_units': 40,
                'seed': 1,
            })
            cfg = load_dgp_config(path, seed=77)
        self.assertEqual(cfg.seed, 77)
        self.assertEqual(cfg.catt.c, 1.5)
        self.assertEqual(cfg.T, 5)

    def test_invalid_json(self):
        """Test malformed JSON is a config error."""
        with tempfile.TemporaryDirectory() as tmp:
            path = self.write(tmp, '{not json')
            with self.assertRaises(ConfigError):
                load_dgp_config(path)

    def test_invalid_values(self):
        """Test form validation failures become config errors."""
        with self.assertRaises(ConfigError):
            load_dgp_config(data={'cohorts': [[3, 0.5]], 'T': 5})
        with self.assertRaises(ConfigError):
            load_dgp_config(data={'cohorts': [[3, 1.0]], 'noise_sd': -1})
        with self.assertRaises(ConfigError):
            load_dgp_config(data={'cohorts': 'three'})


# =====================
# Monte Carlo Tests
# =====================

class EstimatorSpecTest(SimpleTestCase):
    """Test estimator spec parsing."""

    def test_parse(self):
        """Test the accepted spellings and canonical names."""
        self.assertEqual(EstimatorSpec.parse('stacked:cohort').name, 'stacked:cohort')
        self.assertEqual(EstimatorSpec.parse('stacked').name, 'stacked:fwl')
        self.assertEqual(EstimatorSpec.parse('pooled_3wfe').name, 'pooled_3wfe:hw_style')
        self.assertEqual(EstimatorSpec.parse({'kind': 'pooled_3wfe', 'spec': 'plain_3wfe'}).name, 'pooled_3wfe:plain_3wfe')

    def test_unknown_kind(self):
        """Test unknown estimator kinds are refused."""
        with self.assertRaises(ParameterError):
            EstimatorSpec.parse('synthetic')


class MonteCarloTest(SimpleTestCase):
    """Test the Monte Carlo harness."""

    def test_noiseless_stacked_is_exact(self):
        """Test zero noise gives zero bias and full coverage."""
        cfg = base_config(noise_sd=0.0)
        summary = monte_carlo(cfg, ['stacked:fwl', 'stacked:equal'], reps=3, window=(1, 2))
        for name in ('stacked:fwl', 'stacked:equal'):
            for e in (0, 1, 2):
                row = summary.row(name, e)
                self.assertAlmostEqual(row['mean_bias'], 0.0, places=9)
                self.assertAlmostEqual(row['rmse'], 0.0, places=9)
                self.assertEqual(row['coverage_95'], 1.0)
                self.assertEqual(row['n_ok'], 3)
        self.assertEqual(dict(summary.failures), {})

    def test_pooled_rows_have_no_coverage(self):
        """Test the pooled regression reports bias but no coverage or se."""
        summary = monte_carlo(base_config(), ['pooled_3wfe:hw_style'], reps=2, window=(1, 1))
        row = summary.row('pooled_3wfe:hw_style', 0)
        self.assertTrue(pd.isna(row['coverage_95']))
        self.assertTrue(pd.isna(row['mean_se']))
        self.assertEqual(summary.to_dict()['summary'][0]['coverage_95'], None)

    def test_independent_of_workers(self):
        """Test summaries are identical for any n_jobs."""
        cfg = base_config()
        serial = monte_carlo(cfg, ['stacked:cohort'], reps=4, window=(1, 1), n_jobs=1)
        parallel = monte_carlo(cfg, ['stacked:cohort'], reps=4, window=(1, 1), n_jobs=2)
        pd.testing.assert_frame_equal(serial.to_frame(), parallel.to_frame())
        self.assertEqual(dict(serial.pretrend_rejection), dict(parallel.pretrend_rejection))

    def test_reps_positive(self):
        """Test reps must be at least one."""
        with self.assertRaises(ParameterError):
            monte_carlo(base_config(), reps=0)

    @tag('slow')
    def test_coverage_near_nominal(self):
        """Test pointwise intervals cover close to 95% of the time."""
        cfg = base_config(n_units=400)
        summary = monte_carlo(cfg, ['stacked:equal'], reps=300, window=(1, 1), with_pretrends=False)
        for e in (0, 1):
            row = summary.row('stacked:equal', e)
            self.assertLess(abs(row['mean_bias']), 0.1)
            self.assertGreater(row['coverage_95'], 0.89)
            self.assertLess(row['coverage_95'], 0.99)

    @tag('slow')
    def test_pretrend_rejection_tracks_violation(self):
        """Test the violating cohort's pre-trend test rejects far more often."""
        cfg = base_config(n_units=400, T=7, cohorts=((4, 0.3), (6, 0.3)), violation={'cohort': 6, 'gamma': 1.0})
        summary = monte_carlo(cfg, ['stacked:cohort'], reps=100, window=(3, 1))
        self.assertGreater(summary.pretrend_rejection[6], 0.8)
        self.assertLess(summary.pretrend_rejection[4], 0.2)

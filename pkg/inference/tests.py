"""
Test suite for the inference app.
Covers influence functions, plug-in and cluster-robust variances, pointwise
CIs and the multiplier bootstrap.
"""
from types import MappingProxyType

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, override_settings, tag

from estimators.aggregation import event_study
from estimators.pipeline import run_event_study
from inference.bootstrap import bootstrap_draws, critical_index, multiplier_bootstrap
from inference.influence import (
    InfluenceTable,
    aggregated_influence,
    crve_variance,
    influence_table,
    plugin_variance,
    pointwise_ci,
    stack_influence,
    stack_variance,
    variance_estimate,
)
from simulation.dgp import CattSpec, DgpConfig, TrendSpec, simulate_panel
from simulation.fixtures import panel_from_arrays, randomized_panel, shared_control_panel
from stacked_ddd.exceptions import (
    DegenerateBandError,
    FeasibilityError,
    MissingInputError,
    ParameterError,
    WeightError,
)
from stacks.builders import build_all_stacks, build_stack, materialize_stacked


def four_cell_panel():
    """Cohort 3 vs never, T=3, two units per cell; dy at t=3 has cell means 3, 1, 2, 1."""
    cohorts = [3, 3, 3, 3, None, None, None, None]
    eligible = [1, 1, 0, 0, 1, 1, 0, 0]
    last = [2.0, 4.0, 1.0, 1.0, 1.0, 3.0, 0.0, 2.0]
    return panel_from_arrays(cohorts, eligible, [[0.0, 0.0, y] for y in last])


def two_cohort_config(n_units, seed):
    """Cohorts 3 and 4 sharing never-treated controls, dynamic effects and unit noise."""
    return DgpConfig(
        cohorts=((3, 0.3), (4, 0.3)),
        never_share=0.4,
        eligible_share={'default': 0.5, '4': 0.35},
        group_trend=TrendSpec('linear', by={'3': {'b': 0.5}, '4': {'b': -0.5}}),
        catt=CattSpec('linear', a=1.0, b=0.5),
        noise_sd=1.0,
        n_units=n_units,
        T=6,
        seed=seed,
    )


def table_from(phi_by_e):
    return InfluenceTable(phi=MappingProxyType({
        e: pd.Series(values, index=[f'u{i}' for i in range(len(values))], dtype=float)
        for e, values in phi_by_e.items()
    }))


# =====================
# Influence Function Tests
# =====================

class StackInfluenceTest(SimpleTestCase):
    """Test per-stack influence values."""

    def setUp(self):
        self.ds = four_cell_panel()
        self.stack = build_stack(self.ds, 3, L=1, K=0)

    def test_signed_scaled_deviations(self):
        """Test psi = sign * (n_g / n_cell) * (dy - cell mean)."""
        psi = stack_influence(self.stack, self.ds, 0)
        expected = {
            'u000': -4.0, 'u001': 4.0, 'u002': 0.0, 'u003': 0.0,
            'u004': 4.0, 'u005': -4.0, 'u006': -4.0, 'u007': 4.0,
        }
        for unit, value in expected.items():
            self.assertAlmostEqual(psi[unit], value)
        self.assertAlmostEqual(psi.sum(), 0.0)

    def test_stack_variance(self):
        """Test the within-stack variance is the mean squared influence."""
        self.assertAlmostEqual(stack_variance(self.stack, self.ds, 0), 12.0)

    def test_infeasible_event_time(self):
        """Test influence outside the window is a feasibility error."""
        with self.assertRaises(FeasibilityError):
            stack_influence(self.stack, self.ds, 1)

    def test_single_stack_aggregation_is_identity(self):
        """Test phi equals psi when one stack carries all the weight."""
        psi = stack_influence(self.stack, self.ds, 0)
        phi = aggregated_influence([self.stack], self.ds, {3: 1.0}, 0)
        pd.testing.assert_series_equal(phi.sort_index(), psi.sort_index(), check_names=False)

    def test_weights_must_sum_to_one(self):
        """Test aggregation weights off the simplex are refused."""
        with self.assertRaises(WeightError):
            aggregated_influence([self.stack], self.ds, {3: 0.5}, 0)

    def test_weights_for_unknown_stack(self):
        """Test weights naming a cohort without a stack are refused."""
        with self.assertRaises(WeightError):
            aggregated_influence([self.stack], self.ds, {3: 0.5, 9: 0.5}, 0)


class SharedControlInfluenceTest(SimpleTestCase):
    """Test influence aggregation when stacks share never-treated units."""

    def setUp(self):
        self.ds = shared_control_panel()
        self.stacks = list(build_all_stacks(self.ds, L=1, K=1))

    def test_shared_units_counted_once(self):
        """Test n counts unique units and shared controls sum both contributions."""
        weights = {3: 0.5, 4: 0.5}
        phi = aggregated_influence(self.stacks, self.ds, weights, 0)
        self.assertEqual(len(phi), 12)
        psi3 = stack_influence(self.stacks[0], self.ds, 0)
        psi4 = stack_influence(self.stacks[1], self.ds, 0)
        expected = 12 * 0.5 / 8 * (psi3['u008'] + psi4['u008'])
        self.assertAlmostEqual(phi['u008'], expected)
        self.assertAlmostEqual(phi['u000'], 12 * 0.5 / 8 * psi3['u000'])

    def test_zero_weight_stack_excluded(self):
        """Test a zero-weight stack contributes no units."""
        phi = aggregated_influence(self.stacks, self.ds, {3: 1.0, 4: 0.0}, 0)
        self.assertEqual(len(phi), 8)
        self.assertNotIn('u004', phi.index)

    def naive_variance(self, stacks, ds, weights, n, e=0):
        by_cohort = {stack.g: stack for stack in stacks}
        return sum(w ** 2 * n / by_cohort[g].n_g * stack_variance(by_cohort[g], ds, e) for g, w in weights.items())

    def test_cross_covariance_term(self):
        """Test the plug-in variance exceeds the independent-stack sum by the shared-unit cross term."""
        weights = {3: 0.4, 4: 0.6}
        phi = aggregated_influence(self.stacks, self.ds, weights, 0)
        n = len(phi)
        psi3 = stack_influence(self.stacks[0], self.ds, 0)
        psi4 = stack_influence(self.stacks[1], self.ds, 0)
        shared = psi3.index.intersection(psi4.index)
        cross = 2 * n * (0.4 / 8) * (0.6 / 8) * (psi3[shared] * psi4[shared]).sum()
        naive = self.naive_variance(self.stacks, self.ds, weights, n)
        self.assertAlmostEqual(plugin_variance(phi), naive + cross, places=10)
        self.assertNotAlmostEqual(cross, 0.0)

    def test_disjoint_comparisons_match_independent_sum(self):
        """Test the cross term vanishes when the stacks share no units."""
        rng = np.random.default_rng(8)
        ds = panel_from_arrays([3] * 4 + [4] * 4 + [5] * 4 + [None] * 4, [1, 1, 0, 0] * 4, rng.normal(size=(16, 5)))
        stacks = [build_stack(ds, 3, rule='explicit:5', L=1, K=0), build_stack(ds, 4, rule='never', L=1, K=0)]
        weights = {3: 0.5, 4: 0.5}
        phi = aggregated_influence(stacks, ds, weights, 0)
        self.assertEqual(len(phi), 16)
        self.assertAlmostEqual(plugin_variance(phi), self.naive_variance(stacks, ds, weights, 16), places=10)

    def test_influence_table_matrix(self):
        """Test the units by event-time matrix zero-fills absent units."""
        result = event_study(self.stacks, self.ds, 'equal')
        table = influence_table(self.stacks, self.ds, result.weights())
        matrix = table.matrix()
        self.assertEqual(list(matrix.columns), table.event_times())
        self.assertEqual(len(matrix), 12)


# =====================
# Variance and CI Tests
# =====================

class VarianceTest(SimpleTestCase):
    """Test plug-in variance, CRVE and pointwise intervals."""

    def test_plugin_variance(self):
        """Test V = mean(phi^2)."""
        self.assertAlmostEqual(plugin_variance([1.0, -1.0]), 1.0)
        self.assertAlmostEqual(plugin_variance([2.0], n=4), 1.0)

    def test_plugin_variance_bad_n(self):
        """Test n below the number of values, or zero, is refused."""
        with self.assertRaises(ParameterError):
            plugin_variance([1.0, 2.0], n=1)
        with self.assertRaises(MissingInputError):
            plugin_variance([])

    def test_pointwise_ci(self):
        """Test estimate +/- z * sqrt(v / n) at the 95% level."""
        lower, upper = pointwise_ci(1.0, 4.0, 400, alpha=0.05)
        self.assertAlmostEqual(lower, 0.8040036015, places=8)
        self.assertAlmostEqual(upper, 1.1959963985, places=8)

    def test_pointwise_ci_degenerate(self):
        """Test a zero variance gives a zero-width interval."""
        self.assertEqual(pointwise_ci(2.0, 0.0, 10), (2.0, 2.0))

    def test_pointwise_ci_bad_alpha(self):
        """Test alpha must lie strictly inside (0, 1)."""
        with self.assertRaises(ParameterError):
            pointwise_ci(0.0, 1.0, 10, alpha=1.0)

    def test_crve_matches_plugin_for_single_stack(self):
        """Test the clustered variance equals V / n with one stack."""
        ds = four_cell_panel()
        stack = build_stack(ds, 3, L=1, K=0)
        stacked = materialize_stacked([stack], ds)
        v_crve = crve_variance(stacked, [stack], 0, df_correction=False)
        self.assertAlmostEqual(v_crve, 12.0 / 8)

    def test_crve_df_correction(self):
        """Test the small-sample factor G / (G - 1)."""
        ds = four_cell_panel()
        stack = build_stack(ds, 3, L=1, K=0)
        stacked = materialize_stacked([stack], ds)
        self.assertAlmostEqual(crve_variance(stacked, [stack], 0, df_correction=True), 1.5 * 8 / 7)

    @override_settings(STACKED_DDD={'CRVE_DF_CORRECTION': True})
    def test_crve_df_correction_setting(self):
        """Test CRVE_DF_CORRECTION switches the factor on."""
        ds = four_cell_panel()
        stack = build_stack(ds, 3, L=1, K=0)
        stacked = materialize_stacked([stack], ds)
        self.assertAlmostEqual(crve_variance(stacked, [stack], 0), 1.5 * 8 / 7)

    def test_variance_estimate_with_shared_controls(self):
        """Test CRVE is attached only when stacked rows are given and stays in the plug-in's range."""
        rng = np.random.default_rng(17)
        ds = randomized_panel(rng, n_cohorts=2, T=8)
        stacks = list(build_all_stacks(ds, L=1, K=1))
        result = event_study(stacks, ds, 'fwl')
        table = influence_table(stacks, ds, result.weights())
        plain = variance_estimate(table)
        clustered = variance_estimate(table, stacked=materialize_stacked(stacks, ds), stacks=stacks)
        for e in clustered.event_times():
            self.assertIsNone(plain[e].v_crve)
            entry = clustered[e]
            self.assertGreater(entry.v_crve, 0.0)
            self.assertAlmostEqual(entry.v_plugin, plain[e].v_plugin)
            self.assertLess(abs(np.log(entry.v_crve / (entry.v_plugin / entry.n))), 1.0)

    @tag('slow')
    def test_crve_matches_plugin_in_large_samples(self):
        """Test CRVE and V_hat / n agree within 5% at n = 5000 with shared controls."""
        ds = simulate_panel(two_cohort_config(n_units=5000, seed=21))
        stacks = list(build_all_stacks(ds, L=2, K=1))
        result = event_study(stacks, ds, 'fwl')
        table = influence_table(stacks, ds, result.weights())
        estimate = variance_estimate(table, stacked=materialize_stacked(stacks, ds), stacks=stacks)
        for e in estimate.event_times():
            entry = estimate[e]
            self.assertEqual(entry.n, 5000)
            self.assertLess(abs(entry.v_crve / (entry.v_plugin / entry.n) - 1.0), 0.05, msg=f'e={e}')



# =====================
# Bootstrap Tests
# =====================

class MultiplierBootstrapTest(SimpleTestCase):
    """Test the multiplier bootstrap band."""

    def setUp(self):
        rng = np.random.default_rng(2)
        self.table = table_from({0: rng.normal(size=200), 1: rng.normal(size=200) * 2})
        self.estimates = {0: 0.1, 1: -0.3}

    def test_critical_index(self):
        """Test the order statistic ceil((1 - alpha) B) without float drift."""
        self.assertEqual(critical_index(999, 0.05), 950)
        self.assertEqual(critical_index(100, 0.05), 95)
        self.assertEqual(critical_index(1, 0.5), 1)

    def test_deterministic_across_workers(self):
        """Test draws depend on the seed only, not on n_jobs."""
        serial = bootstrap_draws(self.table, 600, 'rademacher', 9, n_jobs=1)
        parallel = bootstrap_draws(self.table, 600, 'rademacher', 9, n_jobs=2)
        np.testing.assert_array_equal(serial, parallel)

    def test_seed_changes_draws(self):
        """Test different seeds give different draws."""
        a = bootstrap_draws(self.table, 50, 'gaussian', 1)
        b = bootstrap_draws(self.table, 50, 'gaussian', 2)
        self.assertFalse(np.allclose(a, b))

    def test_band_brackets_estimates(self):
        """Test every band contains its point estimate and is symmetric."""
        band = multiplier_bootstrap(self.table, self.estimates, B=499, seed=3, alpha=0.05)
        for e, (lower, upper) in band.bands.items():
            self.assertLess(lower, self.estimates[e])
            self.assertAlmostEqual(self.estimates[e] - lower, upper - self.estimates[e])
        self.assertGreater(band.critical_value, 1.0)

    def test_band_contains_pointwise_intervals(self):
        """Test the simultaneous band is at least as wide as every pointwise CI on a simulated panel."""
        ds = simulate_panel(two_cohort_config(n_units=400, seed=8))
        run = run_event_study(ds, L=2, K=2, scheme='fwl', B=999, seed=12)
        self.assertTrue(run.band.covers_pointwise)
        self.assertGreater(run.band.critical_value, 1.96)
        for e in run.result.event_times():
            band_lower, band_upper = run.band.bands[e]
            ci_lower, ci_upper = run.cis[e]
            self.assertLessEqual(band_lower, ci_lower + 1e-12)
            self.assertGreaterEqual(band_upper, ci_upper - 1e-12)


    def test_bootstrap_variance_close_to_plugin(self):
        """Test mean squared draws approximate V / n."""
        band = multiplier_bootstrap(self.table, self.estimates, B=4000, seed=5, multiplier='gaussian')
        for e in (0, 1):
            target = plugin_variance(self.table.phi[e]) / self.table.n(e)
            self.assertAlmostEqual(band.v_boot[e] / target, 1.0, delta=0.1)

    def test_zero_influence_collapses_band(self):
        """Test all-zero influence gives a zero-width band with a warning."""
        table = table_from({0: [0.0, 0.0], 1: [0.0, 0.0]})
        with self.assertLogs('inference.bootstrap', level='WARNING'):
            band = multiplier_bootstrap(table, {0: 1.0, 1: 2.0}, B=20, seed=1)
        self.assertEqual(band.bands[1], (2.0, 2.0))
        self.assertEqual(band.critical_value, 0.0)

    def test_partial_zero_variance(self):
        """Test one degenerate event-time among varying ones raises."""
        table = table_from({0: [0.0, 0.0, 0.0], 1: [1.0, -1.0, 2.0]})
        with self.assertRaises(DegenerateBandError) as ctx:
            multiplier_bootstrap(table, {0: 0.0, 1: 0.0}, B=20, seed=1)
        self.assertEqual(ctx.exception.event_time, 0)

    def test_bad_parameters(self):
        """Test B, multiplier and alpha validation."""
        with self.assertRaises(ParameterError):
            multiplier_bootstrap(self.table, self.estimates, B=0)
        with self.assertRaises(ParameterError):
            multiplier_bootstrap(self.table, self.estimates, B=10, multiplier='mammen')
        with self.assertRaises(ParameterError):
            multiplier_bootstrap(self.table, self.estimates, B=10, alpha=0.0)

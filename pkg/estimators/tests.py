"""
Test suite for the estimators app.
Covers the saturated regression, per-stack event studies, weight schemes,
aggregation and the end-to-end run.
"""
import json
import math
import os
import tempfile
from types import MappingProxyType

import numpy as np
from django.test import SimpleTestCase, override_settings, tag

from estimators.aggregation import (
    WeightScheme,
    aggregate,
    event_study,
    pooled_event_study,
    realized_weights,
)
from estimators.pipeline import average_post_effect, run_event_study
from estimators.saturated import (
    AttEntry,
    SaturatedCoefficients,
    StackAttTable,
    fwl_weights,
    harmonic_cell_variance,
    saturated_ols,
    stack_event_study,
)
from inference.influence import influence_table
from panel.datasets import NEVER, PanelDataset
from simulation.dgp import CattSpec, DgpConfig, TrendSpec, simulate_panel, true_catt
from simulation.fixtures import panel_from_arrays, randomized_panel
from stacked_ddd.exceptions import ConfigError, MissingInputError, ParameterError, WeightError
from stacks.builders import ROLES, Role, build_all_stacks, build_stack, materialize_stacked


def four_cell_panel():
    """Cohort 3 vs never, T=3, two units per cell; dy at t=3 has cell means 3, 1, 2, 1."""
    cohorts = [3, 3, 3, 3, None, None, None, None]
    eligible = [1, 1, 0, 0, 1, 1, 0, 0]
    last = [2.0, 4.0, 1.0, 1.0, 1.0, 3.0, 0.0, 2.0]
    return panel_from_arrays(cohorts, eligible, [[0.0, 0.0, y] for y in last])


def noiseless_config(**overrides):
    """Two cohorts plus never-treated with cohort-specific trends and dynamic effects, no noise."""
    data = dict(
        cohorts=((3, 0.3), (4, 0.3)),
        never_share=0.4,
        eligible_share={'default': 0.5, '4': 0.3},
        group_trend=TrendSpec('linear', by={'3': {'b': 1.0}, '4': {'b': -0.5}, 'never': {'b': 0.2}}),
        eligibility_trend=TrendSpec('quadratic', by={'1': {'c': 0.1}, '0': {'b': -0.2}}),
        catt=CattSpec('linear', a=1.0, b=0.5),
        noise_sd=0.0,
        n_units=200,
        T=6,
        seed=3,
    )
    data.update(overrides)
    return DgpConfig(**data)


def att_table(g, counts, estimate=0.0, e=0):
    """Hand-built StackAttTable with one feasible event-time."""
    cell_counts = MappingProxyType({role: n for role, n in zip(ROLES, counts)})
    return StackAttTable(
        g=g,
        g_c=NEVER,
        entries=MappingProxyType({e: AttEntry(estimate, cell_counts, True)}),
        roster_counts=cell_counts,
    )


def stacked_least_squares(stacked):
    """tau(e) from an explicit OLS fit on stack-by-event-time cell indicators plus S*Q*1{e}."""
    rows = stacked.rows[stacked.rows['event_time'] != -1]
    roles = {role.value: role for role in ROLES}
    s = np.array([float(roles[value].treated_group) for value in rows['role']])
    q = np.array([float(roles[value].eligible) for value in rows['role']])
    event_time = rows['event_time'].to_numpy()
    keys = np.column_stack([rows['stack'].to_numpy(), event_time])
    blocks, block = np.unique(keys, axis=0, return_inverse=True)
    block = np.asarray(block).ravel()
    event_times = sorted(set(event_time.tolist()))
    offset = 3 * len(blocks)
    X = np.zeros((len(rows), offset + len(event_times)))
    index = np.arange(len(rows))
    X[index, 3 * block] = 1.0
    X[index, 3 * block + 1] = s
    X[index, 3 * block + 2] = q
    for k, e in enumerate(event_times):
        X[:, offset + k] = s * q * (event_time == e)
    beta = np.linalg.lstsq(X, rows['dy'].to_numpy(), rcond=None)[0]
    return {e: float(beta[offset + k]) for k, e in enumerate(event_times)}


def random_designs(count, seed):
    """Random panels with random windows and their never-treated stacks."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        ds = randomized_panel(rng)
        L, K = int(rng.integers(1, 4)), int(rng.integers(0, 4))
        yield ds, build_all_stacks(ds, L=L, K=K)


def rebuild(ds, outcomes):
    return PanelDataset(ds.units, outcomes, time_range=(ds.t_min, ds.t_max))


# =====================
# Saturated Regression Tests
# =====================

class SaturatedOlsTest(SimpleTestCase):
    """Test the closed-form saturated regression."""

    def setUp(self):
        self.ds = four_cell_panel()
        self.stack = build_stack(self.ds, 3, L=1, K=0)

    def test_closed_form_coefficients(self):
        """Test mu, lambda, eta and tau from the four cell means."""
        coef = saturated_ols(self.stack, self.ds, 3)
        self.assertAlmostEqual(coef.mu, 1.0)
        self.assertAlmostEqual(coef.lambda_, 0.0)
        self.assertAlmostEqual(coef.eta, 1.0)
        self.assertAlmostEqual(coef.tau_sat, 1.0)

    def test_matches_least_squares(self):
        """Test the closed form agrees with an explicit OLS fit."""
        rows, y = [], []
        for role in ROLES:
            for unit in self.stack.cells[role]:
                s, q = float(role.treated_group), float(role.eligible)
                rows.append([1.0, s, q, s * q])
                y.append(self.ds.outcomes.loc[unit, 3] - self.ds.outcomes.loc[unit, 2])
        beta = np.linalg.lstsq(np.array(rows), np.array(y), rcond=None)[0]
        coef = saturated_ols(self.stack, self.ds, 3)
        np.testing.assert_allclose(beta, [coef.mu, coef.lambda_, coef.eta, coef.tau_sat], atol=1e-12)

    def test_fitted_values_are_cell_means(self):
        """Test the fit reproduces every cell mean."""
        coef = saturated_ols(self.stack, self.ds, 3)
        for role in ROLES:
            self.assertAlmostEqual(coef.fitted(role), coef.cell_means[role])

    def test_from_cell_means(self):
        """Test the factory on plain numbers."""
        coef = SaturatedCoefficients.from_cell_means({
            Role.TREATED_ELIGIBLE: 5.0,
            Role.TREATED_INELIGIBLE: 2.0,
            Role.COMPARISON_ELIGIBLE: 1.0,
            Role.COMPARISON_INELIGIBLE: 1.0,
        })
        self.assertAlmostEqual(coef.tau_sat, 3.0)


class StackEventStudyTest(SimpleTestCase):
    """Test per-stack event studies."""

    def test_normalization_and_values(self):
        """Test e = -1 is zero and post values recover the effect."""
        cfg = noiseless_config()
        ds = simulate_panel(cfg)
        stack = build_stack(ds, 3, L=2, K=2)
        table = stack_event_study(stack, ds)
        self.assertEqual(table.estimate(-1), 0.0)
        for e in (0, 1, 2):
            self.assertAlmostEqual(table.estimate(e), true_catt(cfg, 3, e), places=10)
        self.assertAlmostEqual(table.estimate(-2), 0.0, places=10)

    def test_truncated_window_is_infeasible(self):
        """Test event-times cut by the panel edge are kept as infeasible NaN."""
        ds = simulate_panel(noiseless_config())
        table = stack_event_study(build_stack(ds, 3, L=3, K=1), ds)
        self.assertFalse(table.feasible(-3))
        self.assertTrue(math.isnan(table.estimate(-3)))
        self.assertEqual(table.pre_periods(), [-2])


# =====================
# Weight Scheme Tests
# =====================

class WeightSchemeTest(SimpleTestCase):
    """Test weight scheme parsing and realized weights."""

    def test_parse_aliases(self):
        """Test short names map to scheme kinds."""
        self.assertEqual(WeightScheme.parse('cohort').kind, 'cohort_size')
        self.assertEqual(str(WeightScheme.parse('cohort_size')), 'cohort')

    def test_unknown_scheme(self):
        """Test an unknown scheme is a parameter error."""
        with self.assertRaises(ParameterError):
            WeightScheme.parse('median')

    def test_custom_from_file(self):
        """Test custom:FILE reads cohort weights from JSON."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'w.json')
            with open(path, 'w', encoding='utf-8') as handle:
                json.dump({'2': 1.0, '3': 3.0}, handle)
            scheme = WeightScheme.parse(f'custom:{path}')
        self.assertEqual(dict(scheme.custom), {2: 1.0, 3: 3.0})

    def test_custom_file_not_object(self):
        """Test a custom weight file must hold an object."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'w.json')
            with open(path, 'w', encoding='utf-8') as handle:
                json.dump([1, 2], handle)
            with self.assertRaises(ConfigError):
                WeightScheme.parse(f'custom:{path}')

    def test_fwl_weights(self):
        """Test FWL weights are proportional to the harmonic cell variance."""
        tables = [att_table(2, (10, 10, 10, 10)), att_table(3, (20, 20, 20, 20))]
        self.assertAlmostEqual(harmonic_cell_variance(tables[0].entries[0].cell_counts), 2.5)
        weights = fwl_weights(tables, 0)
        self.assertAlmostEqual(weights[2], 1 / 3)
        self.assertAlmostEqual(weights[3], 2 / 3)
        self.assertEqual(realized_weights(tables, 'fwl', 0), weights)

    def test_cohort_size_weights(self):
        """Test cohort-size weights use the treated-eligible roster."""
        tables = [att_table(2, (30, 5, 5, 5), 2.0), att_table(3, (10, 5, 5, 5), 4.0)]
        estimate, weights = aggregate(tables, 'cohort', 0)
        self.assertAlmostEqual(weights[2], 0.75)
        self.assertAlmostEqual(weights[3], 0.25)
        self.assertAlmostEqual(estimate, 2.5)

    def test_equal_weights(self):
        """Test equal weights over the feasible cohorts."""
        tables = [att_table(2, (30, 5, 5, 5), 2.0), att_table(3, (10, 5, 5, 5), 4.0)]
        estimate, _ = aggregate(tables, 'equal', 0)
        self.assertAlmostEqual(estimate, 3.0)

    def test_precision_needs_variances(self):
        """Test precision weights without variances raise MissingInputError."""
        tables = [att_table(2, (5, 5, 5, 5))]
        with self.assertRaises(MissingInputError):
            realized_weights(tables, 'precision', 0)

    def test_precision_weights(self):
        """Test precision weights are inverse variances normalized."""
        tables = [att_table(2, (5, 5, 5, 5)), att_table(3, (5, 5, 5, 5))]
        weights = realized_weights(tables, 'precision', 0, variances={2: 1.0, 3: 3.0})
        self.assertAlmostEqual(weights[2], 0.75)

    def test_precision_zero_variance(self):
        """Test zero-variance cohorts take the whole weight."""
        tables = [att_table(2, (5, 5, 5, 5)), att_table(3, (5, 5, 5, 5))]
        with self.assertLogs('estimators.aggregation', level='WARNING'):
            weights = realized_weights(tables, 'precision', 0, variances={2: 0.0, 3: 1.0})
        self.assertEqual(weights, {2: 1.0, 3: 0.0})

    def test_custom_weights_missing_cohort(self):
        """Test custom weights must cover every feasible cohort."""
        tables = [att_table(2, (5, 5, 5, 5)), att_table(3, (5, 5, 5, 5))]
        with self.assertRaises(WeightError):
            realized_weights(tables, WeightScheme('custom', {2: 1.0}), 0)

    def test_no_feasible_stack(self):
        """Test aggregation at an event-time nobody covers fails."""
        with self.assertRaises(WeightError):
            realized_weights([att_table(2, (5, 5, 5, 5))], 'equal', 1)


# =====================
# Event Study Tests
# =====================

class EventStudyTest(SimpleTestCase):
    """Test the stacked event study on noiseless simulated panels."""

    def setUp(self):
        self.cfg = noiseless_config()
        self.ds = simulate_panel(self.cfg)
        self.stacks = build_all_stacks(self.ds, L=2, K=2)

    def test_recovers_weighted_truth(self):
        """Test each scheme returns its weighted average of the true effects."""
        for scheme in ('fwl', 'cohort', 'equal'):
            result = event_study(self.stacks, self.ds, scheme)
            for e in result.post_event_times():
                weights = result[e].weights_used
                truth = sum(w * true_catt(self.cfg, g, e) for g, w in weights.items())
                self.assertAlmostEqual(result.estimate(e), truth, places=10, msg=f'{scheme} e={e}')

    def test_skips_normalization(self):
        """Test e = -1 never appears in the result."""
        result = event_study(self.stacks, self.ds, 'equal')
        self.assertNotIn(-1, result.event_times())
        self.assertEqual(result.event_times(), [-2, 0, 1, 2])

    def test_pooled_regression_equals_fwl(self):
        """Test FWL aggregation equals an explicit OLS fit of the stacked regression."""
        noisy = simulate_panel(noiseless_config(noise_sd=1.0))
        stacks = build_all_stacks(noisy, L=2, K=2)
        result = event_study(stacks, noisy, 'fwl')
        brute = stacked_least_squares(materialize_stacked(stacks, noisy))
        for e in result.event_times():
            self.assertAlmostEqual(brute[e], result.estimate(e), places=10)

    def test_frame_has_one_row_per_cohort_and_event_time(self):
        """Test the tidy weights frame."""
        result = event_study(self.stacks, self.ds, 'cohort')
        frame = result.to_frame()
        self.assertEqual(len(frame), 2 * len(result.event_times()))
        sums = frame.groupby('e')['weight'].sum()
        np.testing.assert_allclose(sums.to_numpy(), 1.0)

    @override_settings(STACKED_DDD={'WEIGHT_SCHEME': 'equal'})
    def test_default_scheme_from_settings(self):
        """Test the scheme defaults to WEIGHT_SCHEME."""
        self.assertEqual(event_study(self.stacks, self.ds).scheme.kind, 'equal')

    def test_precision_scheme_runs(self):
        """Test precision weights on a noisy panel sum to one."""
        noisy = simulate_panel(noiseless_config(noise_sd=1.0))
        result = event_study(build_all_stacks(noisy, L=1, K=1), noisy, 'precision')
        for e in result.event_times():
            self.assertAlmostEqual(sum(result[e].weights_used.values()), 1.0)


@tag('slow')
class RandomizedOracleTest(SimpleTestCase):
    """Test the closed forms against brute-force least squares on random panels."""

    def test_saturated_matches_least_squares(self):
        """Test every stack's tau_sat equals an explicit four-column OLS fit."""
        for ds, stacks in random_designs(200, seed=101):
            for stack in stacks:
                for t in range(stack.window[0], stack.window[1] + 1):
                    if t == stack.baseline:
                        continue
                    rows, y = [], []
                    for role, dy in stack.long_differences(ds, t).items():
                        s, q = float(role.treated_group), float(role.eligible)
                        rows += [[1.0, s, q, s * q]] * len(dy)
                        y += dy.tolist()
                    beta = np.linalg.lstsq(np.array(rows), np.array(y), rcond=None)[0]
                    self.assertAlmostEqual(saturated_ols(stack, ds, t).tau_sat, beta[3], delta=1e-10)

    def test_pooled_matches_least_squares(self):
        """Test the pooled coefficients equal the stacked indicator regression and the FWL average."""
        for ds, stacks in random_designs(200, seed=202):
            pooled = pooled_event_study(materialize_stacked(stacks, ds))
            brute = stacked_least_squares(materialize_stacked(stacks, ds))
            self.assertEqual(sorted(pooled), sorted(brute))
            tables = [stack_event_study(stack, ds) for stack in stacks]
            for e, estimate in pooled.items():
                self.assertAlmostEqual(estimate, brute[e], delta=1e-10)
                weights = fwl_weights(tables, e)
                self.assertTrue(all(w > 0 for w in weights.values()))
                self.assertAlmostEqual(math.fsum(weights.values()), 1.0, delta=1e-12)
                average = math.fsum(weights[table.g] * table.estimate(e) for table in tables if table.g in weights)
                self.assertAlmostEqual(estimate, average, delta=1e-10)


class EstimatorInvariantTest(SimpleTestCase):
    """Test structural properties of the stacked estimator."""

    def setUp(self):
        self.ds = simulate_panel(noiseless_config(noise_sd=1.0))

    def test_outcomes_outside_window_do_not_leak(self):
        """Test changing outcomes outside a stack's window leaves its estimates unchanged."""
        rng = np.random.default_rng(9)
        for g in (3, 4):
            stack = build_stack(self.ds, g, L=1, K=1)
            start, end = stack.window
            outside = [t for t in self.ds.outcomes.columns if not start <= t <= end]
            outcomes = self.ds.outcomes.copy()
            outcomes[outside] += rng.normal(scale=50.0, size=(len(outcomes), len(outside)))
            perturbed = rebuild(self.ds, outcomes)
            before = stack_event_study(stack, self.ds)
            after = stack_event_study(build_stack(perturbed, g, L=1, K=1), perturbed)
            for e in before.event_times():
                self.assertAlmostEqual(before.estimate(e), after.estimate(e), places=12)

    def test_linear_in_outcomes(self):
        """Test scaling outcomes by c scales estimates by c and variances by c squared."""
        c = -2.5
        scaled = rebuild(self.ds, self.ds.outcomes * c)
        base = run_event_study(self.ds, L=1, K=1, scheme='cohort', B=0)
        run = run_event_study(scaled, L=1, K=1, scheme='cohort', B=0)
        for e in base.result.event_times():
            self.assertAlmostEqual(run.result.estimate(e), c * base.result.estimate(e), places=10)
            self.assertAlmostEqual(run.variance[e].v_plugin, c ** 2 * base.variance[e].v_plugin, places=8)
            self.assertAlmostEqual(run.variance[e].v_crve, c ** 2 * base.variance[e].v_crve, places=10)

    def test_constant_custom_weights_equal_equal_scheme(self):
        """Test custom weights with the same v_g for every cohort reproduce equal weights."""
        stacks = build_all_stacks(self.ds, L=2, K=2)
        equal = event_study(stacks, self.ds, 'equal')
        custom = event_study(stacks, self.ds, WeightScheme('custom', {3: 7.0, 4: 7.0}))
        for e in equal.event_times():
            self.assertAlmostEqual(custom.estimate(e), equal.estimate(e), places=12)
            self.assertEqual(dict(custom[e].weights_used), dict(equal[e].weights_used))

    def test_exact_identification_with_cohort_specific_effects(self):
        """Test noiseless panels return each cohort's own effect path and flat pre-periods."""
        catt = CattSpec('table', by={3: {0: 1.0, 1: 2.5, 2: -0.5}, 4: {0: -2.0, 1: 0.75, 2: 4.0}})
        cfg = noiseless_config(catt=catt)
        ds = simulate_panel(cfg)
        for stack in build_all_stacks(ds, L=2, K=2):
            table = stack_event_study(stack, ds)
            for e in table.event_times():
                if not table.feasible(e):
                    continue
                expected = true_catt(cfg, stack.g, e) if e >= 0 else 0.0
                self.assertAlmostEqual(table.estimate(e), expected, delta=1e-10, msg=f'g={stack.g} e={e}')
        self.assertNotAlmostEqual(true_catt(cfg, 3, 1), true_catt(cfg, 4, 1))

    def test_violation_stays_in_its_cohort(self):
        """Test a trend violation in one cohort leaves the other cohort's estimates unbiased."""
        cfg = noiseless_config(violation={'cohort': 3, 'gamma': 0.5})
        ds = simulate_panel(cfg)
        tables = {stack.g: stack_event_study(stack, ds) for stack in build_all_stacks(ds, L=2, K=2)}
        clean = tables[4]
        for e in clean.event_times():
            if clean.feasible(e):
                expected = true_catt(cfg, 4, e) if e >= 0 else 0.0
                self.assertAlmostEqual(clean.estimate(e), expected, delta=1e-10)
        self.assertGreater(abs(tables[3].estimate(1) - true_catt(cfg, 3, 1)), 0.1)
        self.assertGreater(abs(tables[3].estimate(-2)), 0.1)


# =====================
# Pipeline Tests
# =====================

class RunEventStudyTest(SimpleTestCase):
    """Test the end-to-end run and the post-period average."""

    def setUp(self):
        self.ds = simulate_panel(noiseless_config(noise_sd=1.0, n_units=300))

    def test_run_without_bootstrap(self):
        """Test B = 0 gives CIs but no band."""
        run = run_event_study(self.ds, L=2, K=2, scheme='cohort', B=0)
        self.assertIsNone(run.band)
        for e in run.result.event_times():
            lower, upper = run.cis[e]
            self.assertLess(lower, run.result.estimate(e))
            self.assertGreater(upper, run.result.estimate(e))
            self.assertIsNotNone(run.variance[e].v_crve)
        frame = run.event_study_frame()
        self.assertEqual(list(frame['e']), run.result.event_times())

    def test_run_with_bootstrap(self):
        """Test the band covers every event-time and is reproducible."""
        first = run_event_study(self.ds, L=1, K=2, scheme='fwl', B=199, seed=4)
        second = run_event_study(self.ds, L=1, K=2, scheme='fwl', B=199, seed=4)
        self.assertEqual(first.band.critical_value, second.band.critical_value)
        self.assertEqual(set(first.band.bands), set(first.result.event_times()))

    def test_post_effect_default_weights(self):
        """Test the average post effect uses equal weights by default."""
        run = run_event_study(self.ds, L=1, K=2, scheme='equal', B=0)
        post = run.post_effect
        expected = np.mean([run.result.estimate(e) for e in (0, 1, 2)])
        self.assertAlmostEqual(post.estimate, expected)
        self.assertEqual(post.n, self.ds.n_units)

    def test_post_effect_bad_weights(self):
        """Test post weights must be non-negative, known and sum to one."""
        stacks = build_all_stacks(self.ds, L=1, K=1)
        result = event_study(stacks, self.ds, 'equal')
        table = influence_table(stacks, self.ds, result.weights())
        with self.assertRaises(ParameterError):
            average_post_effect(result, table, {0: 0.5, 1: 0.4})
        with self.assertRaises(ParameterError):
            average_post_effect(result, table, {0: 0.5, 5: 0.5})
        with self.assertRaises(ParameterError):
            average_post_effect(result, table, {0: 1.5, 1: -0.5})

    def test_post_effect_single_period(self):
        """Test all weight on one event-time reproduces its estimate."""
        stacks = build_all_stacks(self.ds, L=1, K=1)
        result = event_study(stacks, self.ds, 'equal')
        table = influence_table(stacks, self.ds, result.weights())
        post = average_post_effect(result, table, {1: 1.0})
        self.assertAlmostEqual(post.estimate, result.estimate(1))

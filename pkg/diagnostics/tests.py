"""
Test suite for the diagnostics app.
Covers fixed-effect demeaning, implicit regression weights, weight identities,
implied estimands and pre-trend tests.
"""
from dataclasses import replace
from types import MappingProxyType

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, override_settings, tag
from scipy.stats import chi2

from diagnostics.demeaning import Demeaner, SpecKind, demean, observation_frame
from diagnostics.pretrends import pretrend_covariance, pretrend_test, pretrend_variances
from diagnostics.weights import (
    AuxWeightTable,
    aggregated_weights,
    aux_weights,
    check_weight_properties,
    implied_estimand,
    pooled_3wfe_event_study,
    realized_contrasts,
)
from estimators.saturated import AttEntry, StackAttTable, stack_event_study
from inference.influence import stack_variance
from panel.datasets import NEVER
from simulation.dgp import CattSpec, DgpConfig, simulate_panel
from simulation.fixtures import panel_from_arrays, randomized_panel, shared_control_panel, toy_panel
from stacked_ddd.exceptions import (
    CollinearityError,
    ConvergenceError,
    CoverageError,
    DegenerateTestError,
    MissingInputError,
    ParameterError,
)
from stacks.builders import ROLES, build_all_stacks, build_stack


def dummies(codes):
    codes = pd.factorize(pd.Series(list(codes)))[0]
    out = np.zeros((len(codes), codes.max() + 1))
    out[np.arange(len(codes)), codes] = 1.0
    return out


def least_squares_residual(frame, spec, y):
    """Residual from an explicit dummy-variable regression."""
    blocks = []
    for columns in SpecKind.parse(spec).margins:
        keys = frame[list(columns)].astype(str).agg('|'.join, axis=1)
        blocks.append(dummies(keys))
    X = np.hstack(blocks)
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    return y - X @ beta


def pre_table(g, estimate, e=-2):
    counts = MappingProxyType({role: 5 for role in ROLES})
    return StackAttTable(
        g=g,
        g_c=NEVER,
        entries=MappingProxyType({e: AttEntry(estimate, counts, True), -1: AttEntry(0.0, counts, True)}),
        roster_counts=counts,
    )


def never_config(**overrides):
    data = dict(
        cohorts=((2, 0.3), (3, 0.3)),
        never_share=0.4,
        eligible_share={'default': 0.4},
        catt=CattSpec('linear', a=1.0, b=1.0),
        noise_sd=0.5,
        n_units=60,
        T=4,
        seed=13,
    )
    data.update(overrides)
    return DgpConfig(**data)


# =====================
# Demeaning Tests
# =====================

class DemeaningTest(SimpleTestCase):
    """Test alternating-projection demeaning against dummy regressions."""

    def setUp(self):
        rng = np.random.default_rng(8)
        cohorts = [2, 2, 2, 3, 3, 3, None, None, None]
        eligible = [1, 0, 1, 0, 1, 0, 1, 0, 0]
        self.ds = panel_from_arrays(cohorts, eligible, rng.normal(size=(9, 4)))

    def test_matches_dummy_regression(self):
        """Test both specifications reproduce the least-squares residual."""
        frame = observation_frame(self.ds)
        y = frame['outcome'].to_numpy()
        for spec in ('hw_style', 'plain_3wfe'):
            residual = demean(self.ds.outcomes, self.ds, spec)
            np.testing.assert_allclose(residual.to_numpy(), least_squares_residual(frame, spec, y), atol=1e-9)

    def test_unbalanced_panel(self):
        """Test demeaning converges to the regression residual with missing cells."""
        outcomes = self.ds.outcomes.to_numpy().copy()
        outcomes[0, 3] = np.nan
        outcomes[7, 0] = np.nan
        ds = panel_from_arrays(list(self.ds.units['cohort']), list(self.ds.units['eligible']), outcomes)
        frame = observation_frame(ds)
        residual = demean(ds.outcomes, ds, 'plain_3wfe')
        self.assertEqual(len(residual), 9 * 4 - 2)
        np.testing.assert_allclose(
            residual.to_numpy(),
            least_squares_residual(frame, 'plain_3wfe', frame['outcome'].to_numpy()),
            atol=1e-8,
        )

    def test_missing_value(self):
        """Test values must cover every observed cell."""
        values = self.ds.outcomes.stack().iloc[1:]
        with self.assertRaises(MissingInputError):
            demean(values, self.ds)

    def test_iteration_cap(self):
        """Test a too-small iteration cap raises ConvergenceError."""
        frame = observation_frame(self.ds)
        demeaner = Demeaner(frame, 'hw_style', max_iter=1)
        with self.assertRaises(ConvergenceError):
            demeaner(frame['outcome'].to_numpy())

    def test_unknown_spec(self):
        """Test an unknown specification is refused."""
        with self.assertRaises(ParameterError):
            SpecKind.parse('two_way')


# =====================
# Auxiliary Weight Tests
# =====================

class AuxWeightsTest(SimpleTestCase):
    """Test implicit weights on the two-cohort toy design."""

    def setUp(self):
        self.ds = toy_panel()
        self.table = aux_weights(self.ds, 'hw_style', (1, 0))

    def test_toy_weights(self):
        """Test own weights of one half and the contaminating cross weights."""
        self.assertEqual(self.table.event_times_included, (0,))
        self.assertAlmostEqual(self.table.weight(2, 0, 0), 0.5)
        self.assertAlmostEqual(self.table.weight(3, 0, 0), 0.5)
        self.assertAlmostEqual(self.table.weight(2, 1, 0), -0.5)
        self.assertAlmostEqual(self.table.weight(3, -1, 0), -0.5)
        self.assertAlmostEqual(self.table.weight(2, 2, 0), 0.0)

    def test_partial_residual_variance(self):
        """Test sigma^2 of the demeaned indicator."""
        self.assertAlmostEqual(self.table.partial_residual_variance[0], 0.12)

    def test_demeaned_indicator(self):
        """Test the demeaned treated-eligible indicator equals 0.3."""
        frame = observation_frame(self.ds)
        indicator = (frame['eligible'] & (frame['rel'] == 0)).astype(float)
        residual = Demeaner(frame, 'hw_style')(indicator.to_numpy())
        treated = (frame['eligible'] & (frame['rel'] == 0)).to_numpy()
        np.testing.assert_allclose(residual[treated], 0.3, atol=1e-10)

    def test_properties_hold(self):
        """Test the weight identities on a truncated window."""
        report = check_weight_properties(self.table)
        self.assertTrue(report.passed)
        self.assertTrue(report.check('excluded_periods').passed)
        self.assertIn('not checked', report.check('reference_period').detail)
        self.assertFalse(report.contaminated)

    def test_full_window_with_never_treated(self):
        """Test every identity including the reference period on a full window."""
        table = aux_weights(simulate_panel(never_config()), 'hw_style', (2, 2))
        self.assertTrue(table.is_full_window())
        report = check_weight_properties(table, tol=1e-8)
        self.assertTrue(report.passed, report.to_dict())
        self.assertEqual(report.check('reference_period').detail, '')

    def test_plain_spec_properties(self):
        """Test the plain three-way specification also satisfies the identities."""
        table = aux_weights(simulate_panel(never_config()), 'plain_3wfe', (1, 1))
        self.assertTrue(check_weight_properties(table, tol=1e-8).passed)

    def test_collinear_window(self):
        """Test including every realized relative time without never-treated units is collinear."""
        with self.assertRaises(CollinearityError):
            aux_weights(self.ds, 'hw_style', (2, 2))

    def test_bad_window(self):
        """Test L must be at least 1."""
        with self.assertRaises(ParameterError):
            aux_weights(self.ds, 'hw_style', (0, 1))

    def test_unrealized_event_time_dropped(self):
        """Test event-times no cohort reaches are dropped with a warning."""
        with self.assertLogs('diagnostics.weights', level='WARNING'):
            table = aux_weights(simulate_panel(never_config()), 'hw_style', (1, 5))
        self.assertIn(5, table.dropped_event_times)
        self.assertNotIn(5, table.event_times_included)

    def test_negative_own_weight_flagged(self):
        """Test a negative own-period weight marks the table contaminated."""
        table = AuxWeightTable(
            omega=MappingProxyType({(2, 0, 0): 1.5, (3, 0, 0): -0.5, (2, -1, 0): -1.0}),
            event_times_included=(0,),
            partial_residual_variance=MappingProxyType({0: 1.0}),
            spec=SpecKind.HW_STYLE,
            window=(1, 0),
            cohorts=(2, 3),
            relative_times=MappingProxyType({2: frozenset({-1, 0}), 3: frozenset({0})}),
        )
        report = check_weight_properties(table)
        self.assertTrue(report.passed)
        self.assertTrue(report.contaminated)
        self.assertEqual(report.negative_own_weights, ((3, 0, -0.5),))

    def test_frame_lists_never_rows(self):
        """Test never-treated rows appear with zero weight."""
        table = aux_weights(simulate_panel(never_config()), 'hw_style', (1, 1))
        frame = table.to_frame()
        never = frame[frame['g'] == 'never']
        self.assertEqual(len(never), len(table.event_times_included))
        self.assertTrue((never['omega'] == 0.0).all())

    def test_never_treated_weights_computed(self):
        """Test the never-treated weights come from the design and pass at zero."""
        table = aux_weights(simulate_panel(never_config()), 'hw_style', (1, 1))
        self.assertEqual(set(table.never_omega), set(table.event_times_included))
        check = check_weight_properties(table).check('never_treated')
        self.assertTrue(check.passed)
        self.assertEqual(check.max_deviation, 0.0)

    def test_never_treated_violation_reported(self):
        """Test nonzero weight on never-treated units fails the identity."""
        table = aux_weights(simulate_panel(never_config()), 'hw_style', (1, 1))
        planted = replace(table, never_omega=MappingProxyType({j: 0.0 for j in table.event_times_included} | {0: 0.25}))
        with self.assertLogs('diagnostics.weights', level='WARNING'):
            report = check_weight_properties(planted)
        self.assertFalse(report.passed)
        self.assertFalse(report.check('never_treated').passed)
        self.assertAlmostEqual(report.check('never_treated').max_deviation, 0.25)
        self.assertEqual(planted.to_frame().query("g == 'never' and j == 0")['omega'].tolist(), [0.25])

    def test_never_treated_not_applicable(self):
        """Test panels without never-treated units report the identity as not applicable."""
        check = check_weight_properties(self.table).check('never_treated')
        self.assertTrue(check.passed)
        self.assertIn('not applicable', check.detail)


@tag('slow')
@override_settings(STACKED_DDD={'DEMEAN_TOLERANCE': 1e-14})
class RandomizedWeightIdentityTest(SimpleTestCase):
    """Test the weight identities over random designs with uneven cell sizes."""

    def test_identities_on_full_windows(self):
        """Test every identity and the post-period normalization hold to 1e-10."""
        rng = np.random.default_rng(404)
        for k in range(100):
            ds = randomized_panel(rng)
            cohorts = ds.cohorts()
            window = (max(cohorts) - ds.t_min, ds.t_max - min(cohorts))
            spec = 'plain_3wfe' if k % 2 else 'hw_style'
            table = aux_weights(ds, spec, window)
            self.assertTrue(table.is_full_window())
            report = check_weight_properties(table, tol=1e-10)
            self.assertTrue(report.passed, f'design {k}: {report.to_dict()}')
            for name in ('own_period', 'cross_period', 'excluded_periods', 'reference_period', 'never_treated'):
                self.assertTrue(report.check(name).passed, f'design {k}: {name}')
            agg = aggregated_weights(table, tol=1e-10)
            self.assertAlmostEqual(agg.normalization, 1.0, delta=1e-10)



# =====================
# Implied Estimand Tests
# =====================

class ImpliedEstimandTest(SimpleTestCase):
    """Test implied estimands against the pooled regression."""

    def test_constant_effects(self):
        """Test a constant effect passes through the pooled coefficient unchanged."""
        table = aux_weights(toy_panel(), 'hw_style', (1, 0))
        implied = implied_estimand(table, {(2, 0): 2.0, (3, 0): 2.0, (2, 1): 2.0})
        self.assertAlmostEqual(implied[0], 1.0)

    def test_dynamic_effects_cancel(self):
        """Test growing effects can drive the pooled coefficient to zero."""
        table = aux_weights(toy_panel(), 'hw_style', (1, 0))
        implied = implied_estimand(table, {(2, 0): 2.0, (3, 0): 2.0, (2, 1): 4.0})
        self.assertAlmostEqual(implied[0], 0.0)

    def test_pooled_regression_matches(self):
        """Test the pooled coefficient equals the weighted sum of true effects."""
        ds = toy_panel(2.0, 2.0, 4.0)
        pooled = pooled_3wfe_event_study(ds, 'hw_style', (1, 0))
        self.assertAlmostEqual(pooled[0], 0.0, places=9)
        pooled = pooled_3wfe_event_study(toy_panel(2.0, 2.0, 2.0), 'hw_style', (1, 0))
        self.assertAlmostEqual(pooled[0], 1.0, places=9)

    def test_specifications_on_two_by_two_design(self):
        """Test hw_style gives the triple difference and plain_3wfe the treated-group difference on one cohort and two periods."""
        rng = np.random.default_rng(31)
        cohorts = [2] * 12 + [None] * 10
        eligible = [1] * 5 + [0] * 7 + [1] * 6 + [0] * 4
        outcomes = rng.normal(size=(22, 2))
        ds = panel_from_arrays(cohorts, eligible, outcomes)
        change = outcomes[:, 1] - outcomes[:, 0]
        treated_gap = change[:5].mean() - change[5:12].mean()
        comparison_gap = change[12:18].mean() - change[18:].mean()

        hw = pooled_3wfe_event_study(ds, 'hw_style', (1, 0))
        plain = pooled_3wfe_event_study(ds, 'plain_3wfe', (1, 0))
        stacked = stack_event_study(build_stack(ds, 2, L=1, K=0), ds).estimate(0)
        self.assertAlmostEqual(hw[0], treated_gap - comparison_gap, places=9)
        self.assertAlmostEqual(hw[0], stacked, places=9)
        self.assertAlmostEqual(plain[0], treated_gap, places=9)

        # Flat comparison-group eligibility gap: both specifications coincide
        outcomes[12:, 1] = outcomes[12:, 0] + 0.7
        ds = panel_from_arrays(cohorts, eligible, outcomes)
        hw = pooled_3wfe_event_study(ds, 'hw_style', (1, 0))
        plain = pooled_3wfe_event_study(ds, 'plain_3wfe', (1, 0))
        self.assertAlmostEqual(hw[0], plain[0], delta=1e-10)


    def test_realized_contrasts_reproduce_pooled(self):
        """Test realized cell contrasts reproduce the hw_style coefficients."""
        ds = simulate_panel(never_config())
        table = aux_weights(ds, 'hw_style', (2, 1))
        implied = implied_estimand(table, realized_contrasts(ds), provenance='realized')
        pooled = pooled_3wfe_event_study(ds, 'hw_style', (2, 1))
        for j, value in pooled.items():
            self.assertAlmostEqual(implied[j], value, places=8)
        self.assertEqual(implied.provenance, 'realized')

    def test_realized_contrasts_without_never(self):
        """Test the latest cohort is the reference when nobody is never treated."""
        theta = realized_contrasts(toy_panel(1.0, 0.5, 3.0))
        self.assertAlmostEqual(theta[(2, 0)], 1.0)
        self.assertAlmostEqual(theta[(2, 1)], 2.5)
        self.assertEqual(theta[(3, 0)], 0.0)

    def test_missing_catt(self):
        """Test missing inputs with nonzero weight are named."""
        table = aux_weights(toy_panel(), 'hw_style', (1, 0))
        with self.assertRaises(CoverageError) as ctx:
            implied_estimand(table, {(2, 0): 1.0, (3, 0): 1.0})
        self.assertEqual(ctx.exception.missing, [(2, 1)])

    def test_no_anticipation_fills_pre_periods(self):
        """Test no_anticipation treats missing negative relative times as zero."""
        table = aux_weights(simulate_panel(never_config()), 'hw_style', (1, 1))
        catt = {(g, ell): 1.0 for g in (2, 3) for ell in range(0, 3)}
        implied = implied_estimand(table, catt, no_anticipation=True)
        self.assertIn(0, implied.alpha)


# =====================
# Aggregated Weight Tests
# =====================

class AggregatedWeightsTest(SimpleTestCase):
    """Test aggregated post-period weights."""

    def setUp(self):
        self.table = aux_weights(simulate_panel(never_config()), 'hw_style', (1, 1))

    def test_equal_default(self):
        """Test the default averages the included post event-times."""
        agg = aggregated_weights(self.table)
        self.assertEqual(dict(agg.w), {0: 0.5, 1: 0.5})
        expected = 0.5 * self.table.weight(2, 0, 0) + 0.5 * self.table.weight(2, 0, 1)
        self.assertAlmostEqual(agg.Omega[(2, 0)], expected)

    def test_single_period_normalization(self):
        """Test weight on one post period reproduces its own-weight identity."""
        agg = aggregated_weights(self.table, {0: 1.0})
        own = sum(self.table.own_weights(0).values())
        self.assertAlmostEqual(own, 1.0)
        self.assertEqual(agg.to_frame().columns.tolist(), ['g', 'ell', 'omega'])

    def test_bad_weights(self):
        """Test pre-period, negative and non-summing weights are refused."""
        with self.assertRaises(ParameterError):
            aggregated_weights(self.table, {-1: 1.0})
        with self.assertRaises(ParameterError):
            aggregated_weights(self.table, {0: 1.5, 1: -0.5})
        with self.assertRaises(ParameterError):
            aggregated_weights(self.table, {0: 0.5})


# =====================
# Pre-trend Tests
# =====================

class PreTrendTest(SimpleTestCase):
    """Test pre-trend Wald tests."""

    def test_single_coefficient(self):
        """Test W = estimate^2 / variance with one degree of freedom."""
        report = pretrend_test([pre_table(3, 2.0)], variances={(3, -2): 1.0})
        self.assertAlmostEqual(report.joint_statistic, 4.0)
        self.assertEqual(report.dof, 1)
        self.assertAlmostEqual(report.p_value, chi2.sf(4.0, 1))
        self.assertAlmostEqual(report.p_value, 0.0455003, places=6)
        self.assertTrue(report.rejects(0.05))
        self.assertFalse(report.rejects(0.01))

    def test_no_pre_periods(self):
        """Test a window without e < -1 gives an empty test."""
        counts = MappingProxyType({role: 5 for role in ROLES})
        table = StackAttTable(3, NEVER, MappingProxyType({0: AttEntry(1.0, counts, True)}), counts)
        report = pretrend_test([table], variances={})
        self.assertEqual((report.joint_statistic, report.dof, report.p_value), (0.0, 0, 1.0))

    def test_needs_variances(self):
        """Test a test without variances or covariance is refused."""
        with self.assertRaises(MissingInputError):
            pretrend_test([pre_table(3, 2.0)])

    def test_zero_variance_nonzero_estimate(self):
        """Test a nonzero coefficient with zero variance is degenerate."""
        with self.assertRaises(DegenerateTestError):
            pretrend_test([pre_table(3, 2.0)], variances={(3, -2): 0.0})

    def test_zero_variance_zero_estimate(self):
        """Test exactly zero coefficients with zero variance drop out of dof."""
        report = pretrend_test(
            [pre_table(3, 0.0), pre_table(4, 1.0)],
            variances={(3, -2): 0.0, (4, -2): 4.0},
        )
        self.assertEqual(report.dof, 1)
        self.assertAlmostEqual(report.joint_statistic, 0.25)

    def test_joint_covariance_with_shared_controls(self):
        """Test shared comparison units create off-diagonal covariance."""
        ds = shared_control_panel()
        stacks = list(build_all_stacks(ds, L=2, K=0))
        tables = [stack_event_study(stack, ds) for stack in stacks]
        covariance = pretrend_covariance(stacks, ds, tables)
        self.assertEqual(covariance.shape, (2, 2))
        self.assertNotAlmostEqual(covariance.loc[(3, -2), (4, -2)], 0.0)
        variances = pretrend_variances(stacks, ds, tables)
        expected = stack_variance(stacks[0], ds, -2) / stacks[0].n_g
        self.assertAlmostEqual(variances[(3, -2)], expected)

        joint = pretrend_test(tables, covariance=covariance)
        diagonal = pretrend_test(tables, variances=variances)
        self.assertEqual(joint.method, 'joint')
        self.assertEqual(diagonal.method, 'diagonal')
        self.assertEqual(joint.dof, 2)
        self.assertNotAlmostEqual(joint.joint_statistic, diagonal.joint_statistic)

    def test_violation_detected(self):
        """Test a differential pre-trend in one cohort is rejected."""
        cfg = DgpConfig(
            cohorts=((4, 0.3), (5, 0.3)),
            never_share=0.4,
            violation={'cohort': 5, 'gamma': 1.0},
            noise_sd=0.2,
            n_units=400,
            T=6,
            seed=21,
        )
        ds = simulate_panel(cfg)
        stacks = list(build_all_stacks(ds, L=3, K=0))
        tables = [stack_event_study(stack, ds) for stack in stacks]
        by_cohort = {table.g: table for table in tables}
        covariance = pretrend_covariance(stacks, ds, tables)
        self.assertTrue(pretrend_test([by_cohort[5]], covariance=covariance).rejects(0.01))

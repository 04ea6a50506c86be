"""
Test suite for the stacks app.
Covers comparison rules, stack construction, window truncation and the stacked dataset.
"""
from django.test import SimpleTestCase, override_settings

from panel.datasets import NEVER, CohortLabel
from simulation.fixtures import eight_unit_stack_panel, panel_from_arrays, shared_control_panel, toy_panel
from stacked_ddd.exceptions import (
    EmptyCellError,
    FeasibilityError,
    InfeasibleStackError,
    ParameterError,
    WindowError,
)
from stacks.builders import (
    ComparisonRule,
    Role,
    StackSpec,
    admissible_comparisons,
    build_all_stacks,
    build_stack,
    build_widest_stacks,
    materialize_stacked,
)


def staggered_panel():
    """Cohorts 2, 3, 6 plus never-treated, one unit per cell, T=6."""
    cohorts = [2, 2, 3, 3, 6, 6, None, None]
    eligible = [1, 0] * 4
    return panel_from_arrays(cohorts, eligible, [[float(i + t) for t in range(6)] for i in range(8)])


# =====================
# Rule and Spec Tests
# =====================

class ComparisonRuleTest(SimpleTestCase):
    """Test comparison rule parsing."""

    def test_parse_tokens(self):
        """Test the accepted spellings."""
        self.assertEqual(ComparisonRule.parse('never').kind, ComparisonRule.PREFER_NEVER)
        self.assertEqual(ComparisonRule.parse('earliest').kind, ComparisonRule.EARLIEST)
        rule = ComparisonRule.parse('explicit:6')
        self.assertEqual(rule.g_c, CohortLabel(6))
        self.assertEqual(str(rule), 'explicit:6')

    def test_unknown_rule(self):
        """Test an unknown rule is a parameter error."""
        with self.assertRaises(ParameterError):
            ComparisonRule.parse('latest')


class StackSpecTest(SimpleTestCase):
    """Test StackSpec invariants."""

    def test_baseline_and_window(self):
        """Test the baseline is g - 1 and the window [g - L, g + K]."""
        spec = StackSpec(g=4, g_c=None, L=2, K=1)
        self.assertEqual(spec.baseline, 3)
        self.assertEqual(spec.window, (2, 5))
        self.assertTrue(spec.g_c.is_never)

    def test_unclean_comparison(self):
        """Test g_c <= g + K is refused."""
        with self.assertRaises(InfeasibleStackError):
            StackSpec(g=2, g_c=4, L=1, K=2)

    def test_bad_window_lengths(self):
        """Test L must be at least 1 and K non-negative."""
        with self.assertRaises(ParameterError):
            StackSpec(g=2, g_c=None, L=0, K=1)
        with self.assertRaises(ParameterError):
            StackSpec(g=2, g_c=None, L=1, K=-1)


# =====================
# Construction Tests
# =====================

class BuildStackTest(SimpleTestCase):
    """Test build_stack and build_all_stacks."""

    def setUp(self):
        self.ds = staggered_panel()

    def test_admissible_comparisons(self):
        """Test only cohorts later than g + K (and never) are admissible."""
        self.assertEqual(admissible_comparisons(self.ds, 2, 1), frozenset({CohortLabel(6), NEVER}))
        self.assertEqual(admissible_comparisons(self.ds, 2, 4), frozenset({NEVER}))

    def test_prefer_never(self):
        """Test the default rule picks the never-treated cohort."""
        stack = build_stack(self.ds, 2, 'never', L=1, K=1)
        self.assertTrue(stack.g_c.is_never)
        self.assertEqual(stack.baseline, 1)

    def test_earliest_admissible(self):
        """Test the earliest rule picks the earliest clean finite cohort."""
        stack = build_stack(self.ds, 2, 'earliest', L=1, K=1)
        self.assertEqual(stack.g_c, CohortLabel(6))

    def test_explicit_rule_checked(self):
        """Test an explicit comparison still has to be clean."""
        with self.assertRaises(InfeasibleStackError):
            build_stack(self.ds, 2, 'explicit:3', L=1, K=1)

    def test_cells_have_expected_members(self):
        """Test the four cells hold the right units."""
        stack = build_stack(self.ds, 3, 'never', L=1, K=1)
        self.assertEqual(list(stack.cells[Role.TREATED_ELIGIBLE]), ['u002'])
        self.assertEqual(list(stack.cells[Role.COMPARISON_INELIGIBLE]), ['u007'])
        self.assertEqual(stack.n_g, 4)

    def test_window_truncated(self):
        """Test the window is cut at the panel boundaries."""
        stack = build_stack(self.ds, 2, 'never', L=3, K=2)
        self.assertEqual(stack.window, (1, 4))
        self.assertEqual(list(stack.event_times), [-1, 0, 1, 2])
        self.assertFalse(stack.in_window(-2))

    def test_baseline_before_first_period(self):
        """Test a cohort treated in the first period has no baseline."""
        ds = panel_from_arrays([1, 1, None, None], [1, 0, 1, 0], [[0.0] * 3] * 4)
        with self.assertRaises(WindowError):
            build_stack(ds, 1)

    def test_empty_treated_cell(self):
        """Test a cohort lacking ineligible units cannot be stacked."""
        ds = panel_from_arrays([3, 3, None, None], [1, 1, 1, 0], [[0.0] * 4] * 4)
        with self.assertRaises(EmptyCellError):
            build_stack(ds, 3)

    def test_build_all_skips(self):
        """Test cohorts without a clean comparison are skipped and recorded."""
        ds = panel_from_arrays([2, 2, 3, 3], [1, 0, 1, 0], [[0.0] * 4] * 4)
        stacks = build_all_stacks(ds, 'never', L=1, K=1)
        self.assertEqual(stacks.cohorts(), [])
        self.assertEqual(sorted(stacks.skipped), [2, 3])

    def test_build_all_error_mode(self):
        """Test on_infeasible='error' names every failing cohort."""
        ds = panel_from_arrays([2, 2, 3, 3], [1, 0, 1, 0], [[0.0] * 4] * 4)
        with self.assertRaises(InfeasibleStackError) as ctx:
            build_all_stacks(ds, 'never', L=1, K=1, on_infeasible='error')
        self.assertEqual(ctx.exception.cohorts, [2, 3])

    def test_build_all_orders_by_cohort(self):
        """Test stacks come back in ascending g."""
        stacks = build_all_stacks(self.ds, 'never', L=1, K=1)
        self.assertEqual(stacks.cohorts(), [2, 3, 6])

    @override_settings(STACKED_DDD={'WINDOW_L': 1, 'WINDOW_K': 0})
    def test_window_defaults_from_settings(self):
        """Test L and K default to the configured window."""
        stack = build_stack(self.ds, 3)
        self.assertEqual((stack.spec.L, stack.spec.K), (1, 0))

    def test_feasibility_with_missing_outcome(self):
        """Test a cell without usable units at t is infeasible there."""
        ds = panel_from_arrays(
            [3, 3, None, None], [1, 0, 1, 0],
            [[0.0, 0.0, 0.0, float('nan')], [0.0] * 4, [0.0] * 4, [0.0] * 4],
        )
        stack = build_stack(ds, 3, L=1, K=1)
        self.assertTrue(stack.feasible_at(ds, 0))
        self.assertFalse(stack.feasible_at(ds, 1))
        with self.assertRaises(FeasibilityError):
            stack.require_feasible(ds, 1)


class WidestStacksTest(SimpleTestCase):
    """Test per-cohort windows stretched to the longest clean horizon."""

    def test_never_treated_comparison(self):
        """Test each cohort reaches the last period when never-treated units exist."""
        stacks = build_widest_stacks(staggered_panel())
        self.assertEqual([(s.g, s.spec.L, s.spec.K) for s in stacks], [(2, 1, 4), (3, 2, 3), (6, 5, 0)])
        self.assertTrue(all(s.g_c == NEVER for s in stacks))

    def test_explicit_rule_limits_horizon(self):
        """Test an explicit finite comparison caps K below g_c - g."""
        stacks = build_widest_stacks(staggered_panel(), rule='explicit:6')
        self.assertEqual([(s.g, s.spec.K) for s in stacks], [(2, 3), (3, 2)])
        self.assertTrue(all(s.g_c == CohortLabel(6) for s in stacks))
        self.assertIn(6, stacks.skipped)

    def test_without_never_treated(self):
        """Test the earlier cohort falls back to the only clean horizon and the last is skipped."""
        stacks = build_widest_stacks(toy_panel())
        self.assertEqual(len(stacks), 1)
        stack = stacks.by_cohort(2)
        self.assertEqual((stack.g_c, stack.spec.K, stack.window), (CohortLabel(3), 0, (1, 2)))
        self.assertEqual(list(stacks.skipped), [3])


# =====================
# Stacked Dataset Tests
# =====================

class MaterializeStackedTest(SimpleTestCase):
    """Test the concatenated stacked dataset."""

    def test_shared_controls_appear_per_stack(self):
        """Test a never-treated unit is duplicated once per stack."""
        ds = shared_control_panel()
        stacks = build_all_stacks(ds, 'never', L=1, K=1)
        stacked = materialize_stacked(stacks, ds)
        self.assertEqual(stacked.stacks_containing('u008'), frozenset({3, 4}))
        self.assertEqual(stacked.stacks_containing('u000'), frozenset({3}))
        self.assertEqual(len(stacked.unique_units()), 12)

    def test_rows_and_baseline(self):
        """Test rows carry long differences from g - 1 and zero at e = -1."""
        ds = eight_unit_stack_panel()
        stack = build_stack(ds, 3, L=1, K=1)
        stacked = materialize_stacked([stack], ds)
        self.assertEqual(len(stacked), 8 * 3)
        self.assertTrue((stacked.rows_at(-1)['dy'] == 0).all())
        row = stacked.rows[(stacked.rows['unit'] == 'u000') & (stacked.rows['event_time'] == 1)].iloc[0]
        expected = ds.outcomes.loc['u000', 4] - ds.outcomes.loc['u000', 2]
        self.assertAlmostEqual(row['dy'], expected)

    def test_no_stacks(self):
        """Test materializing nothing is a parameter error."""
        with self.assertRaises(ParameterError):
            materialize_stacked([], eight_unit_stack_panel())

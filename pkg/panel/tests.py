"""
Test suite for the panel app.
Covers the CSV loader, cohort labels, long differences, cell means and validation.
"""
import math

import pandas as pd
from django.test import SimpleTestCase, override_settings

from panel.datasets import NEVER, CohortLabel, PanelDataset, cell_mean, load_panel, long_difference
from panel.forms import SchemaConfigForm
from panel.validators import COHORT_BEFORE_FIRST_PERIOD, EMPTY_CELL, validate_panel
from simulation.fixtures import panel_from_arrays
from stacked_ddd.exceptions import (
    DuplicateObservationError,
    EmptyCellError,
    PanelParseError,
    SchemaError,
    UnknownUnitError,
)

HEADER = 'unit,time,outcome,cohort,eligible\n'


def csv_bytes(*rows):
    return (HEADER + '\n'.join(rows) + '\n').encode()


# =====================
# Cohort Label Tests
# =====================

class CohortLabelTest(SimpleTestCase):
    """Test parsing and ordering of cohort labels."""

    def test_parse_never_tokens(self):
        """Test blank, 'never', None and NaN all map to the never label."""
        for value in ('', 'never', 'NEVER', None, float('nan'), pd.NA):
            self.assertTrue(CohortLabel.parse(value).is_never, value)

    def test_parse_integer(self):
        """Test integer strings and integral floats become finite labels."""
        self.assertEqual(CohortLabel.parse('4'), CohortLabel(4))
        self.assertEqual(CohortLabel.parse(4.0), CohortLabel(4))

    def test_non_integer_rejected(self):
        """Test fractional cohort times are refused."""
        with self.assertRaises(TypeError):
            CohortLabel.parse(2.5)

    def test_never_sorts_last(self):
        """Test never-treated sorts after every finite cohort."""
        labels = sorted([NEVER, CohortLabel(5), CohortLabel(2)], key=CohortLabel.sort_key)
        self.assertEqual([str(c) for c in labels], ['2', '5', 'never'])

    def test_never_has_no_arithmetic(self):
        """Test the never label cannot be used as a number."""
        with self.assertRaises(TypeError):
            NEVER + 1


# =====================
# Loader Tests
# =====================

class LoadPanelTest(SimpleTestCase):
    """Test load_panel parsing, remapping and error reporting."""

    def test_load_remaps_calendar_time(self):
        """Test the first period becomes 1 and cohorts shift with it."""
        ds = load_panel(csv_bytes(
            'a,2001,1.0,2002,1',
            'a,2002,2.0,2002,1',
            'b,2001,0.5,never,0',
            'b,2002,0.7,never,0',
        ))
        self.assertEqual(ds.time_range, (1, 2))
        self.assertEqual(ds.cohorts(), [2])
        self.assertTrue(ds.has_never)
        self.assertEqual(ds.metadata['time_origin'], 2000)
        self.assertEqual(ds.unit('a').outcomes[2], 2.0)

    def test_missing_outcome_is_unobserved(self):
        """Test a blank outcome leaves the unit-period unobserved."""
        ds = load_panel(csv_bytes(
            'a,1,1.0,2,1',
            'a,2,,2,1',
        ))
        self.assertFalse(ds.is_balanced)
        self.assertEqual(ds.metadata['missing_outcomes'], 1)
        self.assertEqual(dict(ds.unit('a').outcomes), {1: 1.0})

    def test_duplicate_observation(self):
        """Test a repeated (unit, time) names the unit, time and row."""
        with self.assertRaises(DuplicateObservationError) as ctx:
            load_panel(csv_bytes(
                'a,1,1.0,2,1',
                'a,1,2.0,2,1',
            ))
        self.assertEqual(ctx.exception.unit, 'a')
        self.assertEqual(ctx.exception.time, 1)
        self.assertEqual(ctx.exception.row, 3)

    def test_non_integer_time(self):
        """Test a fractional time is a parse error with its row number."""
        with self.assertRaises(PanelParseError) as ctx:
            load_panel(csv_bytes('a,1.5,1.0,2,1'))
        self.assertEqual(ctx.exception.row, 2)

    def test_non_numeric_outcome(self):
        """Test a non-numeric outcome is a parse error."""
        with self.assertRaises(PanelParseError):
            load_panel(csv_bytes('a,1,abc,2,1'))

    def test_bad_eligibility_token(self):
        """Test eligibility outside {0, 1, true, false} is a schema error."""
        with self.assertRaises(SchemaError):
            load_panel(csv_bytes('a,1,1.0,2,yes'))

    def test_time_varying_eligibility(self):
        """Test eligibility must not change over a unit's rows."""
        with self.assertRaises(SchemaError):
            load_panel(csv_bytes(
                'a,1,1.0,2,1',
                'a,2,1.0,2,0',
            ))

    def test_conflicting_cohorts(self):
        """Test a unit may carry only one cohort label."""
        with self.assertRaises(SchemaError):
            load_panel(csv_bytes(
                'a,1,1.0,2,1',
                'a,2,1.0,3,1',
            ))

    def test_missing_column(self):
        """Test a header without a required column is a schema error."""
        with self.assertRaises(SchemaError):
            load_panel(b'unit,time,outcome,cohort\na,1,1.0,2\n')

    def test_custom_schema_and_never_token(self):
        """Test renamed columns and a custom never token."""
        data = b'id;period;y;first;elig\na;1;1.0;0;1\na;2;3.0;0;1\n'
        ds = load_panel(
            data,
            schema={'unit': 'id', 'time': 'period', 'outcome': 'y', 'cohort': 'first', 'eligible': 'elig'},
            never_token='0',
            delimiter=';',
        )
        self.assertTrue(ds.has_never)
        self.assertEqual(ds.cohorts(), [])

    @override_settings(STACKED_DDD={'NEVER_TOKENS': ('', 'never', 'inf')})
    def test_never_tokens_setting(self):
        """Test NEVER_TOKENS drives the default never tokens."""
        ds = load_panel(csv_bytes('a,1,1.0,inf,1', 'a,2,1.0,inf,1'))
        self.assertTrue(ds.has_never)

    def test_csv_export_reloads(self):
        """Test to_csv writes calendar time that load_panel reads back equal."""
        ds = load_panel(csv_bytes(
            'a,2001,1.0,2002,1',
            'a,2002,2.0,2002,1',
            'b,2001,0.5,never,0',
            'b,2002,,never,0',
        ))
        again = load_panel(ds.to_csv().encode())
        self.assertTrue(ds.equals(again))


# =====================
# Dataset Tests
# =====================

class PanelDatasetTest(SimpleTestCase):
    """Test PanelDataset construction guards and views."""

    def setUp(self):
        self.ds = panel_from_arrays(
            [2, 2, None, None],
            [1, 0, 1, 0],
            [[1.0, 4.0, 6.0], [1.0, 2.0, 2.5], [0.0, 1.0, float('nan')], [2.0, 2.0, 2.0]],
        )

    def test_cell_counts(self):
        """Test counts cover both flags of every observed cohort."""
        counts = self.ds.cell_counts()
        self.assertEqual(counts[(CohortLabel(2), True)], 1)
        self.assertEqual(counts[(NEVER, False)], 1)
        self.assertEqual(len(counts), 4)

    def test_cohort_outside_time_range(self):
        """Test a cohort beyond the last period is rejected."""
        with self.assertRaises(SchemaError):
            panel_from_arrays([9], [1], [[1.0, 2.0]])

    def test_duplicate_unit_ids(self):
        """Test unit ids must be unique."""
        units = pd.DataFrame({'cohort': pd.array([2, 2], dtype='Int64'), 'eligible': [True, False]}, index=['a', 'a'])
        with self.assertRaises(SchemaError):
            PanelDataset(units, pd.DataFrame({1: [0.0, 0.0], 2: [0.0, 0.0]}, index=['a', 'a']))

    def test_unknown_unit(self):
        """Test looking up an absent unit raises UnknownUnitError."""
        with self.assertRaises(UnknownUnitError):
            self.ds.unit('zzz')

    def test_long_difference(self):
        """Test Y_t - Y_baseline for one unit."""
        self.assertEqual(long_difference(self.ds, 'u000', 3, 1), 5.0)

    def test_long_difference_unobserved(self):
        """Test an unobserved period gives None."""
        self.assertIsNone(long_difference(self.ds, 'u002', 3, 1))

    def test_cell_mean_drops_unobserved(self):
        """Test cell_mean skips members missing a period and counts them."""
        result = cell_mean(self.ds, ['u002', 'u003'], 3, 1)
        self.assertEqual(result.mean, 0.0)
        self.assertEqual(result.count, 1)
        self.assertEqual(result.dropped, 1)

    def test_cell_mean_empty(self):
        """Test cell_mean with no usable member raises EmptyCellError."""
        with self.assertRaises(EmptyCellError):
            cell_mean(self.ds, ['u002'], 3, 1)

    def test_cell_mean_averages(self):
        """Test cell_mean over two fully observed units."""
        result = cell_mean(self.ds, ['u000', 'u001'], 2, 1)
        self.assertTrue(math.isclose(result.mean, 2.0))


# =====================
# Validation Tests
# =====================

class ValidatePanelTest(SimpleTestCase):
    """Test validate_panel reports."""

    def test_clean_panel(self):
        """Test a panel with all four cells populated passes."""
        ds = panel_from_arrays([3, 3, None, None], [1, 0, 1, 0], [[0.0] * 4] * 4)
        report = validate_panel(ds)
        self.assertTrue(report.ok)
        self.assertEqual(report.violations, ())

    def test_empty_cell(self):
        """Test a cohort without ineligible units is flagged."""
        ds = panel_from_arrays([3, 3, None, None], [1, 1, 1, 0], [[0.0] * 4] * 4)
        report = validate_panel(ds)
        self.assertFalse(report.ok)
        self.assertEqual(report.violations[0].kind, EMPTY_CELL)
        self.assertIn('empty cell (3,0)', report.violations[0].message)

    def test_cohort_at_first_period(self):
        """Test a cohort starting in the first period has no baseline."""
        ds = panel_from_arrays([1, 1, None, None], [1, 0, 1, 0], [[0.0] * 3] * 4)
        kinds = [v.kind for v in validate_panel(ds).violations]
        self.assertIn(COHORT_BEFORE_FIRST_PERIOD, kinds)

    def test_design_restricts_overlap(self):
        """Test overlap only considers cohorts a design needs."""
        ds = panel_from_arrays([3, 3, 4, None, None], [1, 0, 1, 1, 0], [[0.0] * 5] * 5)
        self.assertFalse(validate_panel(ds).overlap_ok)
        self.assertTrue(validate_panel(ds, design=[(3, None)]).overlap_ok)

    def test_report_dict(self):
        """Test the report serializes never cohorts and flags."""
        ds = panel_from_arrays([3, 3, None, None], [1, 0, 1, 0], [[0.0] * 4] * 4)
        data = validate_panel(ds).to_dict()
        self.assertIn({'cohort': 'never', 'eligible': 1, 'count': 1}, data['cell_counts'])
        self.assertTrue(data['balanced'])


# =====================
# Form Tests
# =====================

class SchemaConfigFormTest(SimpleTestCase):
    """Test the schema config form."""

    def test_defaults(self):
        """Test blank fields fall back to the default header names."""
        form = SchemaConfigForm(data={})
        self.assertTrue(form.is_valid())
        self.assertEqual(form.schema()['unit'], 'unit')
        self.assertIsNone(form.cleaned_data['never_token'])

    def test_duplicate_headers(self):
        """Test two logical columns cannot share a header."""
        form = SchemaConfigForm(data={'unit': 'id', 'time': 'id'})
        self.assertFalse(form.is_valid())

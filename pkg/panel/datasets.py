"""
Panel data containers, the CSV loader, and long-difference helpers.

A PanelDataset holds two pandas frames that share one index of unit ids:

    units     columns ``cohort`` (nullable Int64, <NA> means never treated)
              and ``eligible`` (bool)
    outcomes  one float column per integer time in ``time_range``;
              NaN marks an unobserved (unit, time)

Times are integer indices. Calendar periods are remapped at load so that the
first observed period is 1; ``metadata['time_origin']`` recovers the calendar.
"""
from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import pandas as pd

from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import (
    DuplicateObservationError,
    EmptyCellError,
    PanelParseError,
    SchemaError,
    UnknownUnitError,
)

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {
    'unit': 'unit',
    'time': 'time',
    'outcome': 'outcome',
    'cohort': 'cohort',
    'eligible': 'eligible',
}

ELIGIBLE_TOKENS = {'1': True, '0': False, 'true': True, 'false': False}
MISSING_OUTCOME_TOKENS = {'', 'na', 'nan', 'null'}

# Row numbers in parse errors count the header line as row 1
_HEADER_ROWS = 1
_PARSER_LINE = re.compile(r'line (\d+)')


# ============================================
# COHORT LABELS
# ============================================

@dataclass(frozen=True)
class CohortLabel:
    """Treatment-enabling period of a group, or the never-treated sentinel.

    ``g is None`` encodes never treated. The label deliberately defines no
    numeric conversion, so arithmetic on a never label fails loudly.
    """
    g: int | None = None

    def __post_init__(self):
        if self.g is None:
            return
        if isinstance(self.g, (bool, np.bool_)) or not isinstance(self.g, (int, np.integer)):
            raise TypeError(f'cohort time must be an integer, got {self.g!r}')
        object.__setattr__(self, 'g', int(self.g))

    @classmethod
    def parse(cls, value):
        """Build a label from an int, a never token, <NA> or an existing label."""
        if isinstance(value, CohortLabel):
            return value
        if value is None or value is pd.NA:
            return NEVER
        if isinstance(value, str):
            token = value.strip().lower()
            if token in ('', 'never', 'inf'):
                return NEVER
            return cls(int(token))
        if isinstance(value, float):
            if np.isnan(value) or np.isinf(value):
                return NEVER
            if not value.is_integer():
                raise TypeError(f'cohort time must be an integer, got {value!r}')
            return cls(int(value))
        return cls(value)

    @property
    def is_never(self):
        return self.g is None

    def sort_key(self):
        return (1, 0) if self.g is None else (0, self.g)

    def to_json(self):
        return 'never' if self.g is None else self.g

    def __str__(self):
        return 'never' if self.g is None else str(self.g)


NEVER = CohortLabel()


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    cohort: CohortLabel
    eligible: bool
    outcomes: Mapping[int, float]

    @property
    def observed_times(self):
        return frozenset(self.outcomes)


class CellMean(NamedTuple):
    mean: float
    count: int
    dropped: int


# ============================================
# PANEL DATASET
# ============================================

class PanelDataset:
    """Immutable long panel with a time-invariant cohort and eligibility per unit."""

    def __init__(self, units, outcomes, time_range=None, metadata=None):
        units = units.copy()
        units.index = units.index.astype(str)
        if not units.index.is_unique:
            duplicate = units.index[units.index.duplicated()][0]
            raise SchemaError(f'unit id {duplicate} appears more than once')
        missing = {'cohort', 'eligible'} - set(units.columns)
        if missing:
            raise SchemaError(f'units frame lacks column(s): {", ".join(sorted(missing))}')
        units = units[['cohort', 'eligible']].copy()
        units['cohort'] = units['cohort'].astype('Int64')
        units['eligible'] = units['eligible'].astype(bool)
        units.index.name = 'unit'

        outcomes = outcomes.copy()
        outcomes.index = outcomes.index.astype(str)
        outcomes.columns = [int(c) for c in outcomes.columns]
        extra = outcomes.index.difference(units.index)
        if len(extra):
            raise SchemaError(f'outcomes given for unknown unit {extra[0]}')

        if time_range is None:
            if not len(outcomes.columns):
                raise SchemaError('cannot infer time range from an empty outcome frame')
            time_range = (min(outcomes.columns), max(outcomes.columns))
        t_min, t_max = int(time_range[0]), int(time_range[1])
        if t_min > t_max:
            raise SchemaError(f'invalid time range [{t_min}, {t_max}]')

        outside = [c for c in outcomes.columns if c < t_min or c > t_max]
        if outside and outcomes[outside].notna().any().any():
            raise SchemaError(f'outcomes observed outside time range [{t_min}, {t_max}]')
        outcomes = outcomes.reindex(index=units.index, columns=range(t_min, t_max + 1)).astype(float)
        outcomes.index.name = 'unit'
        outcomes.columns.name = 'time'

        finite = units['cohort'].dropna()
        bad = finite[(finite < t_min) | (finite > t_max)]
        if len(bad):
            raise SchemaError(
                f'cohort {int(bad.iloc[0])} of unit {bad.index[0]} lies outside '
                f'time range [{t_min}, {t_max}]'
            )

        self._units = units
        self._outcomes = outcomes
        self._time_range = (t_min, t_max)
        self.metadata = MappingProxyType(dict(metadata or {}))

    # --- construction helpers -------------------------------------------------

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord], time_range=None, metadata=None):
        records = list(records)
        units = pd.DataFrame(
            {
                'cohort': pd.array([r.cohort.g for r in records], dtype='Int64'),
                'eligible': [bool(r.eligible) for r in records],
            },
            index=pd.Index([str(r.unit_id) for r in records], name='unit'),
        )
        outcomes = pd.DataFrame(
            [dict(r.outcomes) for r in records],
            index=units.index,
            dtype=float,
        )
        return cls(units, outcomes, time_range=time_range, metadata=metadata)

    # --- read-only views ------------------------------------------------------

    @property
    def units(self):
        return self._units

    @property
    def outcomes(self):
        return self._outcomes

    @property
    def time_range(self):
        return self._time_range

    @property
    def t_min(self):
        return self._time_range[0]

    @property
    def t_max(self):
        return self._time_range[1]

    @property
    def times(self):
        return range(self.t_min, self.t_max + 1)

    @property
    def unit_ids(self):
        return self._units.index

    @property
    def n_units(self):
        return len(self._units)

    @property
    def has_never(self):
        return bool(self._units['cohort'].isna().any())

    @property
    def is_balanced(self):
        return bool(self._outcomes.notna().all().all())

    def cohorts(self):
        """Finite cohorts present, ascending."""
        return sorted(int(g) for g in self._units['cohort'].dropna().unique())

    def cohort_labels(self):
        labels = [CohortLabel(g) for g in self.cohorts()]
        if self.has_never:
            labels.append(NEVER)
        return labels

    def cohort_mask(self, cohort):
        cohort = CohortLabel.parse(cohort)
        column = self._units['cohort']
        if cohort.is_never:
            return column.isna().to_numpy()
        return (column == cohort.g).to_numpy(dtype=bool, na_value=False)

    def members(self, cohort, eligible=None):
        """Unit ids in a cohort, optionally restricted to one eligibility cell."""
        mask = self.cohort_mask(cohort)
        if eligible is not None:
            mask &= self._units['eligible'].to_numpy() == bool(eligible)
        return self._units.index[mask]

    def cell_counts(self):
        """Unit counts per (cohort, eligible) for every observed cohort and both flags."""
        counts = {}
        for label in self.cohort_labels():
            mask = self.cohort_mask(label)
            eligible = self._units['eligible'].to_numpy()
            counts[(label, True)] = int((mask & eligible).sum())
            counts[(label, False)] = int((mask & ~eligible).sum())
        return counts

    def unit(self, unit_id):
        key = str(unit_id)
        if key not in self._units.index:
            raise UnknownUnitError(unit_id)
        row = self._units.loc[key]
        observed = self._outcomes.loc[key].dropna()
        return UnitRecord(
            unit_id=key,
            cohort=CohortLabel.parse(row['cohort']),
            eligible=bool(row['eligible']),
            outcomes=MappingProxyType({int(t): float(y) for t, y in observed.items()}),
        )

    def outcome_at(self, t, members=None):
        """Outcome column at time t (all NaN when t is outside the time range)."""
        index = self._units.index if members is None else pd.Index(members).astype(str)
        if t not in self._outcomes.columns:
            return pd.Series(np.nan, index=index, dtype=float)
        return self._outcomes[t].reindex(index)

    def long_differences(self, t, baseline, members=None):
        """Y_t - Y_baseline per unit, NaN where either period is unobserved."""
        return self.outcome_at(t, members) - self.outcome_at(baseline, members)

    # --- export ---------------------------------------------------------------

    def to_long(self):
        frame = self._outcomes.stack(future_stack=True).rename('outcome').reset_index()
        frame = frame.join(self._units, on='unit')
        return frame[['unit', 'time', 'outcome', 'cohort', 'eligible']]

    def to_csv(self, path_or_buf=None, schema=None, never_token='never'):
        """Write the full (unit, time) grid in calendar time; unobserved outcomes are blank."""
        columns = {**DEFAULT_SCHEMA, **(schema or {})}
        origin = int(self.metadata.get('time_origin', 0))
        frame = self.to_long()
        out = pd.DataFrame({
            columns['unit']: frame['unit'],
            columns['time']: frame['time'] + origin,
            columns['outcome']: frame['outcome'],
            columns['cohort']: [
                never_token if pd.isna(g) else str(int(g) + origin) for g in frame['cohort']
            ],
            columns['eligible']: frame['eligible'].map({True: '1', False: '0'}),
        })
        return out.to_csv(path_or_buf, index=False, sep=ddd_setting('DELIMITER'))

    def equals(self, other):
        """Data equality; metadata such as the source path is not compared."""
        return (
            isinstance(other, PanelDataset)
            and self._time_range == other._time_range
            and self._units.equals(other._units)
            and self._outcomes.equals(other._outcomes)
        )

    def __repr__(self):
        return (
            f'<PanelDataset units={self.n_units} time_range={self._time_range} '
            f'cohorts={self.cohorts()} never={self.has_never}>'
        )


# ============================================
# LOADER
# ============================================

def _parser_error_row(exc):
    match = _PARSER_LINE.search(str(exc))
    return int(match.group(1)) if match else None


def _rows(mask):
    return [int(i) + _HEADER_ROWS + 1 for i in np.flatnonzero(np.asarray(mask))]


def load_panel(source, schema=None, never_token=None, delimiter=None):
    """
    Load a long panel from delimiter-separated text.

    Args:
        source: file path, bytes, or a text/byte stream with a header row
        schema: optional map from logical column (unit, time, outcome, cohort,
            eligible) to the header name used in the file
        never_token: cohort token meaning never treated; defaults to the
            NEVER_TOKENS setting ("" or "never")
        delimiter: field separator, defaults to the DELIMITER setting

    Returns:
        PanelDataset with times remapped so the earliest period is 1
    """
    columns = {**DEFAULT_SCHEMA, **(schema or {})}
    if never_token is None:
        never_tokens = {t.lower() for t in ddd_setting('NEVER_TOKENS')}
    else:
        never_tokens = {never_token.strip().lower()}
    sep = delimiter or ddd_setting('DELIMITER')

    if isinstance(source, (bytes, bytearray)):
        label = '<bytes>'
        source = io.BytesIO(source)
    else:
        label = str(source) if isinstance(source, str) or hasattr(source, '__fspath__') else '<stream>'

    try:
        frame = pd.read_csv(source, sep=sep, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise PanelParseError('input has no header row') from exc
    except pd.errors.ParserError as exc:
        raise PanelParseError(str(exc).strip(), row=_parser_error_row(exc)) from exc

    for key, name in columns.items():
        if name not in frame.columns:
            raise SchemaError(f"missing column '{name}' (schema key '{key}')")
    frame = frame[[columns[k] for k in DEFAULT_SCHEMA]].apply(lambda s: s.str.strip())
    frame.columns = list(DEFAULT_SCHEMA)

    empty_unit = frame['unit'] == ''
    if empty_unit.any():
        raise PanelParseError('empty unit id', row=_rows(empty_unit)[0])

    # Times must be integers
    time_num = pd.to_numeric(frame['time'], errors='coerce')
    bad_time = time_num.isna() | (time_num != np.floor(time_num))
    if bad_time.any():
        row = _rows(bad_time)[0]
        raise PanelParseError(f"time value {frame['time'].iloc[row - 2]!r} is not an integer", row=row)
    times = time_num.astype(np.int64)

    # Outcomes: blank or NA tokens are missing, anything else must parse
    outcome_raw = frame['outcome']
    missing_outcome = outcome_raw.str.lower().isin(MISSING_OUTCOME_TOKENS)
    bad_outcome = pd.to_numeric(outcome_raw.where(~missing_outcome), errors='coerce').isna() & ~missing_outcome
    if bad_outcome.any():
        row = _rows(bad_outcome)[0]
        raise PanelParseError(f'outcome value {outcome_raw.iloc[row - 2]!r} is not numeric', row=row)
    outcomes = outcome_raw.where(~missing_outcome, 'nan').astype(float)

    eligible = frame['eligible'].str.lower().map(ELIGIBLE_TOKENS)
    if eligible.isna().any():
        row = _rows(eligible.isna())[0]
        raise SchemaError(
            f"row {row}: eligible value {frame['eligible'].iloc[row - 2]!r} not in {{0, 1, true, false}}"
        )

    cohort_raw = frame['cohort']
    is_never = cohort_raw.str.lower().isin(never_tokens)
    cohort_num = pd.to_numeric(cohort_raw.where(~is_never), errors='coerce')
    bad_cohort = ~is_never & (cohort_num.isna() | (cohort_num != np.floor(cohort_num)))
    if bad_cohort.any():
        row = _rows(bad_cohort)[0]
        raise PanelParseError(f'cohort value {cohort_raw.iloc[row - 2]!r} is neither an integer nor a never token', row=row)

    if frame.empty:
        raise PanelParseError('input has a header but no data rows')

    tidy = pd.DataFrame({
        'unit': frame['unit'],
        'time': times,
        'outcome': outcomes,
        'cohort': pd.array(cohort_num.where(~is_never), dtype='Int64'),
        'eligible': eligible.astype(bool),
    })

    duplicated = tidy.duplicated(['unit', 'time'], keep='first')
    if duplicated.any():
        row = _rows(duplicated)[0]
        first = tidy.iloc[row - 2]
        raise DuplicateObservationError(first['unit'], int(first['time']), row=row)

    by_unit = tidy.groupby('unit', sort=False)
    cohort_variants = by_unit['cohort'].nunique(dropna=False)
    if (cohort_variants > 1).any():
        unit = cohort_variants.index[cohort_variants > 1][0]
        raise SchemaError(f'unit {unit} carries more than one cohort label')
    eligible_variants = by_unit['eligible'].nunique()
    if (eligible_variants > 1).any():
        unit = eligible_variants.index[eligible_variants > 1][0]
        raise SchemaError(f'eligibility of unit {unit} varies over time; eligibility must be time-invariant')

    origin = int(tidy['time'].min()) - 1
    tidy['time'] -= origin
    tidy['cohort'] -= origin
    t_max = int(tidy['time'].max())

    unit_order = pd.Index(tidy['unit'].unique(), name='unit')
    units = tidy.groupby('unit', sort=False).agg(cohort=('cohort', 'first'), eligible=('eligible', 'first'))
    units = units.reindex(unit_order)
    wide = tidy.pivot(index='unit', columns='time', values='outcome').reindex(unit_order)

    n_missing = int(missing_outcome.sum())
    if n_missing:
        logger.warning(f'{n_missing} row(s) with missing outcome treated as unobserved unit-periods')
    ds = PanelDataset(
        units,
        wide,
        time_range=(1, t_max),
        metadata={
            'source': label,
            'time_origin': origin,
            'n_rows': int(len(tidy)),
            'missing_outcomes': n_missing,
        },
    )
    logger.info(f'Loaded panel from {label}: {ds.n_units} units, T={t_max}, cohorts={ds.cohorts()}, never={ds.has_never}')
    return ds


# ============================================
# LONG DIFFERENCES AND CELL MEANS
# ============================================

def long_difference(ds: PanelDataset, unit, t, baseline):
    """Y[unit, t] - Y[unit, baseline], or None when either period is unobserved."""
    key = str(unit)
    if key not in ds.unit_ids:
        raise UnknownUnitError(unit)
    value = ds.long_differences(t, baseline, [key]).iloc[0]
    if pd.isna(value):
        return None
    return float(value)


def cell_mean(ds: PanelDataset, members, t, baseline):
    """Mean long difference over members observed at both t and baseline.

    Members missing either period are left out of the mean and counted in
    ``dropped``.
    """
    index = pd.Index([str(m) for m in members]).unique()
    if index.empty:
        raise EmptyCellError('members', 'no members given')
    unknown = index.difference(ds.unit_ids)
    if len(unknown):
        raise UnknownUnitError(unknown[0])
    diffs = ds.long_differences(t, baseline, index)
    usable = diffs.dropna()
    if usable.empty:
        raise EmptyCellError('members', f'no member observed at both t={t} and baseline={baseline}')
    return CellMean(float(usable.mean()), int(len(usable)), int(len(diffs) - len(usable)))

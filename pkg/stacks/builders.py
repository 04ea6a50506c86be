"""
Stack construction: one four-cell sub-experiment per treated cohort.

A stack pairs treated cohort g with one clean comparison cohort g_c
(never treated, or finite with g_c > g + K) over the event window
[g - L, g + K]. The baseline period is always g - 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType

import numpy as np
import pandas as pd

from panel.datasets import NEVER, CohortLabel, PanelDataset
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import (
    EmptyCellError,
    FeasibilityError,
    InfeasibleStackError,
    ParameterError,
    WindowError,
)

logger = logging.getLogger(__name__)


class Role(Enum):
    TREATED_ELIGIBLE = 'treated_eligible'
    TREATED_INELIGIBLE = 'treated_ineligible'
    COMPARISON_ELIGIBLE = 'comparison_eligible'
    COMPARISON_INELIGIBLE = 'comparison_ineligible'

    @property
    def sign(self):
        """Sign of the cell in the triple difference."""
        return _SIGNS[self]

    @property
    def treated_group(self):
        return self in (Role.TREATED_ELIGIBLE, Role.TREATED_INELIGIBLE)

    @property
    def eligible(self):
        return self in (Role.TREATED_ELIGIBLE, Role.COMPARISON_ELIGIBLE)

    @property
    def short(self):
        return _SHORT[self]


_SIGNS = {
    Role.TREATED_ELIGIBLE: 1,
    Role.TREATED_INELIGIBLE: -1,
    Role.COMPARISON_ELIGIBLE: -1,
    Role.COMPARISON_INELIGIBLE: 1,
}
_SHORT = {
    Role.TREATED_ELIGIBLE: 'n_g1',
    Role.TREATED_INELIGIBLE: 'n_g0',
    Role.COMPARISON_ELIGIBLE: 'ngc1',
    Role.COMPARISON_INELIGIBLE: 'ngc0',
}
ROLES = tuple(Role)


# ============================================
# SPECS AND RULES
# ============================================

@dataclass(frozen=True)
class StackSpec:
    g: int
    g_c: CohortLabel
    L: int
    K: int

    def __post_init__(self):
        object.__setattr__(self, 'g', int(self.g))
        object.__setattr__(self, 'g_c', CohortLabel.parse(self.g_c))
        if self.L < 1:
            raise ParameterError(f'pre-window length L must be >= 1, got {self.L}')
        if self.K < 0:
            raise ParameterError(f'post-window length K must be >= 0, got {self.K}')
        if not self.g_c.is_never and self.g_c.g <= self.g + self.K:
            raise InfeasibleStackError(
                [self.g],
                f'comparison cohort {self.g_c.g} is not clean: requires g_c > g + K = {self.g + self.K}',
            )

    @property
    def baseline(self):
        return self.g - 1

    @property
    def window(self):
        return (self.g - self.L, self.g + self.K)

    def to_dict(self):
        return {'g': self.g, 'g_c': self.g_c.to_json(), 'L': self.L, 'K': self.K}


@dataclass(frozen=True)
class ComparisonRule:
    """How build_stack picks g_c: prefer_never, earliest_admissible or explicit."""
    kind: str = 'prefer_never'
    g_c: CohortLabel | None = None

    PREFER_NEVER = 'prefer_never'
    EARLIEST = 'earliest_admissible'
    EXPLICIT = 'explicit'

    @classmethod
    def parse(cls, value):
        """Accepts ``never``, ``earliest``, ``explicit:G`` (or ``explicit:never``)."""
        if isinstance(value, ComparisonRule):
            return value
        token = str(value).strip().lower()
        if token in ('never', 'prefer_never'):
            return cls(cls.PREFER_NEVER)
        if token in ('earliest', 'earliest_admissible'):
            return cls(cls.EARLIEST)
        if token.startswith('explicit:'):
            target = token.split(':', 1)[1]
            try:
                return cls(cls.EXPLICIT, CohortLabel.parse(target))
            except (TypeError, ValueError) as exc:
                raise ParameterError(f'invalid explicit comparison cohort {target!r}') from exc
        raise ParameterError(f'unknown comparison rule {value!r}; use never, earliest or explicit:G')

    def __str__(self):
        if self.kind == self.EXPLICIT:
            return f'explicit:{self.g_c}'
        return 'never' if self.kind == self.PREFER_NEVER else 'earliest'


# ============================================
# STACK
# ============================================

@dataclass(frozen=True, eq=False)
class Stack:
    spec: StackSpec
    cells: MappingProxyType
    window: tuple

    @property
    def g(self):
        return self.spec.g

    @property
    def g_c(self):
        return self.spec.g_c

    @property
    def baseline(self):
        return self.spec.baseline

    @property
    def cell_counts(self):
        return {role: len(self.cells[role]) for role in ROLES}

    @property
    def n_g(self):
        return sum(len(self.cells[role]) for role in ROLES)

    @property
    def members(self):
        return pd.Index(np.concatenate([self.cells[role].to_numpy() for role in ROLES]), name='unit')

    @property
    def event_times(self):
        start, end = self.window
        return range(start - self.g, end - self.g + 1)

    def cell_label(self, role):
        cohort = self.g if role.treated_group else self.g_c
        return f'({cohort},{int(role.eligible)})'

    def time_of(self, e):
        return self.g + e

    def in_window(self, e):
        start, end = self.window
        return start <= self.g + e <= end

    def long_differences(self, ds: PanelDataset, t):
        """Usable long differences per cell at time t (units missing t or the baseline dropped)."""
        return {
            role: ds.long_differences(t, self.baseline, self.cells[role]).dropna()
            for role in ROLES
        }

    def usable_counts(self, ds: PanelDataset, t):
        observed = ds.outcomes.notna()
        if t not in observed.columns:
            return {role: 0 for role in ROLES}
        both = observed[t] & observed[self.baseline]
        return {role: int(both.reindex(self.cells[role]).sum()) for role in ROLES}

    def feasible_at(self, ds: PanelDataset, e):
        if not self.in_window(e):
            return False
        return all(count > 0 for count in self.usable_counts(ds, self.time_of(e)).values())

    def require_feasible(self, ds: PanelDataset, e):
        if not self.in_window(e):
            raise FeasibilityError(f'event-time {e} lies outside the window of stack g={self.g}')
        counts = self.usable_counts(ds, self.time_of(e))
        empty = [role.value for role, count in counts.items() if count == 0]
        if empty:
            raise FeasibilityError(
                f'stack g={self.g} is infeasible at event-time {e}: no usable units in {", ".join(empty)}'
            )
        return counts

    def to_dict(self):
        return {
            **self.spec.to_dict(),
            'baseline': self.baseline,
            'window': list(self.window),
            'cell_counts': {role.value: len(self.cells[role]) for role in ROLES},
            'members': {role.value: list(self.cells[role]) for role in ROLES},
        }


class StackCollection:
    """Ordered stacks (ascending g) plus the cohorts that were skipped and why."""

    def __init__(self, stacks, skipped=None, rule=None, L=None, K=None):
        self._stacks = tuple(sorted(stacks, key=lambda s: s.g))
        self.skipped = MappingProxyType(dict(skipped or {}))
        self.rule = rule
        self.L = L
        self.K = K

    def __iter__(self):
        return iter(self._stacks)

    def __len__(self):
        return len(self._stacks)

    def __getitem__(self, item):
        return self._stacks[item]

    def __bool__(self):
        return bool(self._stacks)

    def cohorts(self):
        return [s.g for s in self._stacks]

    def by_cohort(self, g):
        for stack in self._stacks:
            if stack.g == g:
                return stack
        raise KeyError(g)

    def specs(self):
        return [s.spec for s in self._stacks]

    def to_dict(self):
        return {
            'rule': None if self.rule is None else str(self.rule),
            'L': self.L,
            'K': self.K,
            'stacks': [s.to_dict() for s in self._stacks],
            'skipped': {str(g): reason for g, reason in self.skipped.items()},
        }


# ============================================
# CONSTRUCTION
# ============================================

def _cells_nonempty(ds, cohort):
    return len(ds.members(cohort, True)) > 0 and len(ds.members(cohort, False)) > 0


def admissible_comparisons(ds: PanelDataset, g, K):
    """Clean comparison cohorts for g with all four cells populated.

    Returns an empty set when either cell of g itself is empty.
    """
    g = int(g)
    if not _cells_nonempty(ds, CohortLabel(g)):
        return frozenset()
    admissible = {
        CohortLabel(g_c) for g_c in ds.cohorts()
        if g_c > g + K and _cells_nonempty(ds, CohortLabel(g_c))
    }
    if ds.has_never and _cells_nonempty(ds, NEVER):
        admissible.add(NEVER)
    return frozenset(admissible)


def _choose_comparison(ds, g, rule, K):
    candidates = admissible_comparisons(ds, g, K)
    finite = sorted(c.g for c in candidates if not c.is_never)
    if rule.kind == ComparisonRule.EXPLICIT:
        return rule.g_c
    if rule.kind == ComparisonRule.PREFER_NEVER:
        if NEVER in candidates:
            return NEVER
        if finite:
            return CohortLabel(finite[0])
    elif rule.kind == ComparisonRule.EARLIEST:
        if finite:
            return CohortLabel(finite[0])
        if NEVER in candidates:
            return NEVER
    raise InfeasibleStackError([g], f'no admissible comparison cohort with K={K}')


def _require_cell(ds, cohort, eligible):
    members = ds.members(cohort, eligible)
    if not len(members):
        raise EmptyCellError(f'({cohort},{int(eligible)})')
    return members


def build_stack(ds: PanelDataset, g, rule='never', L=None, K=None):
    """
    Build the four-cell stack for treated cohort g.

    The pre-window is truncated at t_min and the post-window at t_max; only
    a baseline g - 1 before t_min is an error.
    """
    L = ddd_setting('WINDOW_L') if L is None else int(L)
    K = ddd_setting('WINDOW_K') if K is None else int(K)
    rule = ComparisonRule.parse(rule)
    g = int(g)

    if g not in ds.cohorts():
        raise InfeasibleStackError([g], 'cohort not present in the panel')
    if g - 1 < ds.t_min:
        raise WindowError(f'baseline period {g - 1} of cohort {g} precedes the first period {ds.t_min}')

    treated = CohortLabel(g)
    _require_cell(ds, treated, True)
    _require_cell(ds, treated, False)

    g_c = _choose_comparison(ds, g, rule, K)
    spec = StackSpec(g=g, g_c=g_c, L=L, K=K)
    if not g_c.is_never and g_c.g not in ds.cohorts():
        raise EmptyCellError(f'({g_c},1)', f'comparison cohort {g_c} has no units')
    if g_c.is_never and not ds.has_never:
        raise EmptyCellError('(never,1)', 'no never-treated units in the panel')

    cells = MappingProxyType({
        Role.TREATED_ELIGIBLE: _require_cell(ds, treated, True),
        Role.TREATED_INELIGIBLE: _require_cell(ds, treated, False),
        Role.COMPARISON_ELIGIBLE: _require_cell(ds, g_c, True),
        Role.COMPARISON_INELIGIBLE: _require_cell(ds, g_c, False),
    })
    start, end = spec.window
    window = (max(start, ds.t_min), min(end, ds.t_max))
    if window != spec.window:
        logger.info(f'Stack g={g}: window {spec.window} truncated to {window}')
    return Stack(spec=spec, cells=cells, window=window)


def build_all_stacks(ds: PanelDataset, rule='never', L=None, K=None, on_infeasible='skip'):
    """
    One stack per treated cohort that admits a clean comparison.

    Args:
        on_infeasible: 'skip' records failing cohorts in ``skipped``;
            'error' raises InfeasibleStackError naming all of them
    """
    if on_infeasible not in ('skip', 'error'):
        raise ParameterError(f"on_infeasible must be 'skip' or 'error', got {on_infeasible!r}")
    L = ddd_setting('WINDOW_L') if L is None else int(L)
    K = ddd_setting('WINDOW_K') if K is None else int(K)
    rule = ComparisonRule.parse(rule)

    stacks, skipped = [], {}
    for g in ds.cohorts():
        try:
            stacks.append(build_stack(ds, g, rule, L, K))
        except (InfeasibleStackError, EmptyCellError, WindowError) as exc:
            skipped[g] = str(exc)

    if skipped:
        if on_infeasible == 'error':
            raise InfeasibleStackError(sorted(skipped), '; '.join(skipped[g] for g in sorted(skipped)))
        for g, reason in skipped.items():
            logger.warning(f'Skipping cohort {g}: {reason}')
    logger.info(f'Built {len(stacks)} stack(s) with rule={rule}, L={L}, K={K}')
    return StackCollection(stacks, skipped=skipped, rule=rule, L=L, K=K)


def build_widest_stacks(ds: PanelDataset, rule='never'):
    """
    One stack per treated cohort over the longest window the rule allows.

    The pre-window reaches back to the first period. K is the largest
    horizon at which the rule still finds a clean comparison, so each
    cohort gets its own window.
    """
    rule = ComparisonRule.parse(rule)
    stacks, skipped = [], {}
    for g in ds.cohorts():
        reason = f'no clean comparison for cohort {g} at any horizon'
        for K in range(ds.t_max - g, -1, -1):
            try:
                stacks.append(build_stack(ds, g, rule, L=max(g - ds.t_min, 1), K=K))
                break
            except (InfeasibleStackError, EmptyCellError, WindowError) as exc:
                reason = str(exc)
        else:
            skipped[g] = reason
            logger.warning(f'Skipping cohort {g}: {reason}')
    logger.info(f'Built {len(stacks)} widest stack(s) with rule={rule}: {[(s.g, s.spec.K) for s in stacks]}')
    return StackCollection(stacks, skipped=skipped, rule=rule)


# ============================================
# STACKED DATASET
# ============================================

STACKED_COLUMNS = ['stack', 'unit', 'time', 'role', 'event_time', 'dy']


class StackedDataset:
    """Concatenated stack rows, one per (stack, unit, time) with baseline observed."""

    def __init__(self, rows, stacks):
        self.rows = rows
        self.stacks = stacks
        grouped = rows.groupby('unit', sort=False)['stack'].agg(lambda s: frozenset(int(g) for g in s))
        self.index = MappingProxyType(grouped.to_dict())

    def __len__(self):
        return len(self.rows)

    def stacks_containing(self, unit):
        return self.index.get(str(unit), frozenset())

    def rows_at(self, e):
        return self.rows[self.rows['event_time'] == e]

    def unique_units(self):
        return pd.Index(self.rows['unit'].unique(), name='unit')

    def to_csv(self, path_or_buf=None):
        return self.rows[STACKED_COLUMNS].to_csv(path_or_buf, index=False)


def materialize_stacked(stacks, ds: PanelDataset):
    """Concatenate all stacks into the stacked dataset."""
    stacks = list(stacks)
    if not stacks:
        raise ParameterError('materialize_stacked needs at least one stack')

    frames = []
    for stack in stacks:
        start, end = stack.window
        times = list(range(start, end + 1))
        for role in ROLES:
            members = stack.cells[role]
            block = ds.outcomes.loc[members, times].sub(ds.outcomes.loc[members, stack.baseline], axis=0)
            long = block.stack(future_stack=True).rename('dy').dropna().reset_index()
            long['stack'] = stack.g
            long['role'] = role.value
            long['event_time'] = long['time'] - stack.g
            frames.append(long)

    rows = pd.concat(frames, ignore_index=True)[STACKED_COLUMNS]
    rows = rows.astype({'stack': np.int64, 'time': np.int64, 'event_time': np.int64, 'dy': float})
    rows = rows.sort_values(['stack', 'unit', 'time'], kind='stable').reset_index(drop=True)
    logger.info(f'Materialized stacked dataset: {len(rows)} rows over {len(stacks)} stack(s)')
    return StackedDataset(rows, stacks)

"""
Aggregation of per-stack estimates into event-study parameters.

Weight schemes at event-time e, over the cohorts feasible at e:

    fwl          V_{g,e} / sum V      (what the pooled saturated regression does)
    cohort_size  n_{g,1} / sum n_{g',1}
    equal        1 / |feasible|
    precision    inverse estimated variance of tau_hat_{g,e}, normalized
    custom       v_g / sum v_g for user-supplied v_g > 0
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import pandas as pd

from panel.datasets import PanelDataset
from stacks.builders import ROLES, Role, StackedDataset
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import ConfigError, MissingInputError, ParameterError, WeightError

from .saturated import harmonic_cell_variance, stack_event_study

logger = logging.getLogger(__name__)

SCHEME_KINDS = ('fwl', 'cohort_size', 'equal', 'precision', 'custom')
_ALIASES = {'cohort': 'cohort_size', 'cohort-size': 'cohort_size', 'eq': 'equal', 'prec': 'precision'}


@dataclass(frozen=True)
class WeightScheme:
    kind: str = 'fwl'
    custom: MappingProxyType | None = None
    source: str | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ParameterError(f'unknown weight scheme {self.kind!r}')
        if self.kind == 'custom':
            if not self.custom:
                raise WeightError('custom weights need at least one v_g')
            object.__setattr__(
                self, 'custom', MappingProxyType({int(g): float(v) for g, v in self.custom.items()})
            )

    @classmethod
    def parse(cls, value):
        """Accepts fwl, cohort, equal, precision, or custom:FILE (JSON object g -> v_g)."""
        if isinstance(value, WeightScheme):
            return value
        token = str(value).strip()
        if token.lower().startswith('custom:'):
            return cls.from_file(token.split(':', 1)[1])
        kind = _ALIASES.get(token.lower(), token.lower())
        return cls(kind)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding='utf-8') as handle:
                raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f'custom weight file {path} is not valid JSON: {exc}') from exc
        if not isinstance(raw, dict):
            raise ConfigError(f'custom weight file {path} must hold a JSON object mapping cohort to weight')
        try:
            custom = {int(g): float(v) for g, v in raw.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'custom weight file {path}: cohorts must be integers and weights numbers') from exc
        return cls('custom', custom, source=str(path))

    def __str__(self):
        if self.kind == 'custom':
            return f'custom:{self.source}' if self.source else 'custom'
        return 'cohort' if self.kind == 'cohort_size' else self.kind

    def to_dict(self):
        data = {'kind': self.kind}
        if self.custom:
            data['custom'] = {str(g): v for g, v in self.custom.items()}
        return data


def _precision_weights(feasible, variances, e):
    if variances is None:
        raise MissingInputError('precision weights need per-stack variance estimates')
    try:
        values = {table.g: float(variances[table.g]) for table in feasible}
    except KeyError as exc:
        raise MissingInputError(f'no variance estimate for cohort {exc.args[0]} at event-time {e}') from exc
    if any(v < 0 for v in values.values()):
        raise WeightError(f'negative variance estimate at event-time {e}')
    exact = [g for g, v in values.items() if v == 0]
    if exact:
        # Zero-variance cohorts dominate the inverse-variance limit and share it equally
        logger.warning(f'Precision weights at e={e}: zero variance for cohort(s) {exact}')
        return {g: (1.0 if g in exact else 0.0) for g in values}
    return {g: 1.0 / v for g, v in values.items()}


def realized_weights(att, scheme, e, variances=None):
    """Normalized weights of the cohorts feasible at e under the scheme."""
    scheme = WeightScheme.parse(scheme)
    feasible = [table for table in att if table.feasible(e)]
    if not feasible:
        raise WeightError(f'no stack is feasible at event-time {e}')

    if scheme.kind == 'fwl':
        raw = {table.g: harmonic_cell_variance(table.entries[e].cell_counts) for table in feasible}
    elif scheme.kind == 'cohort_size':
        raw = {table.g: float(table.roster_counts[Role.TREATED_ELIGIBLE]) for table in feasible}
    elif scheme.kind == 'equal':
        raw = {table.g: 1.0 for table in feasible}
    elif scheme.kind == 'precision':
        raw = _precision_weights(feasible, variances, e)
    else:
        raw = {}
        for table in feasible:
            if table.g not in scheme.custom:
                raise WeightError(f'custom weights lack cohort {table.g}')
            v = scheme.custom[table.g]
            if not v > 0:
                raise WeightError(f'custom weight for cohort {table.g} must be positive, got {v}')
            raw[table.g] = v

    total = math.fsum(raw.values())
    return {g: v / total for g, v in raw.items()}


def aggregate(att, scheme, e, variances=None):
    """
    Weighted average of per-stack estimates at event-time e.

    Args:
        att: iterable of StackAttTable
        scheme: WeightScheme or its string form
        e: event-time
        variances: map g -> estimated variance of tau_hat_{g,e}; required
            for precision weights

    Returns:
        (estimate, weights_used)
    """
    att = list(att)
    weights = realized_weights(att, scheme, e, variances)
    by_cohort = {table.g: table for table in att}
    estimate = math.fsum(w * by_cohort[g].estimate(e) for g, w in weights.items())
    return estimate, weights


# ============================================
# POOLED REGRESSION VIA FWL
# ============================================

def pooled_event_study(stacked: StackedDataset, stacks=None):
    """
    Coefficients of the fully saturated stacked event-study regression.

    Computed from the stacked rows: within-stack tau_sat at each e, averaged
    with FWL weights V_{g,e}. Event-time -1 is the normalization and is left out.
    """
    rows = stacked.rows
    if stacks is not None:
        rows = rows[rows['stack'].isin({stack.g for stack in stacks})]
    cells = rows.groupby(['event_time', 'stack', 'role'])['dy'].agg(['mean', 'count'])
    signs = {role.value: role.sign for role in ROLES}

    estimates = {}
    for e, by_e in cells.groupby(level='event_time'):
        e = int(e)
        if e == -1:
            continue
        numerator = denominator = 0.0
        for _, block in by_e.groupby(level='stack'):
            block = block.droplevel(['event_time', 'stack'])
            if len(block) < len(ROLES):
                continue
            V = 1.0 / float((1.0 / block['count']).sum())
            tau = sum(signs[role] * block.loc[role, 'mean'] for role in block.index)
            numerator += V * tau
            denominator += V
        if denominator > 0:
            estimates[e] = numerator / denominator
    return estimates


# ============================================
# EVENT STUDY
# ============================================

@dataclass(frozen=True)
class EventTimeEstimate:
    estimate: float
    weights_used: MappingProxyType
    n_effective: int

    def to_dict(self):
        return {
            'estimate': self.estimate,
            'weights_used': {str(g): w for g, w in sorted(self.weights_used.items())},
            'n_effective': self.n_effective,
        }


@dataclass(frozen=True, eq=False)
class EventStudyResult:
    estimates: MappingProxyType
    scheme: WeightScheme
    window: tuple
    tables: tuple = field(default_factory=tuple)

    def event_times(self):
        return sorted(self.estimates)

    def __getitem__(self, e):
        return self.estimates[e]

    def estimate(self, e):
        return self.estimates[e].estimate

    def weights(self):
        return {e: dict(self.estimates[e].weights_used) for e in self.event_times()}

    def post_event_times(self):
        return [e for e in self.event_times() if e >= 0]

    def to_frame(self):
        """Tidy rows (g, e, estimate, weight, cell counts), one per cohort used at e."""
        rows = []
        by_cohort = {table.g: table for table in self.tables}
        for e in self.event_times():
            for g, w in sorted(self.estimates[e].weights_used.items()):
                entry = by_cohort[g].entries[e]
                row = {'g': g, 'e': e, 'estimate': entry.estimate, 'weight': w}
                row.update({role.short: entry.count(role) for role in ROLES})
                rows.append(row)
        return pd.DataFrame(rows, columns=['g', 'e', 'estimate', 'weight', 'n_g1', 'n_g0', 'ngc1', 'ngc0'])

    def to_dict(self):
        return {
            'scheme': self.scheme.to_dict(),
            'window': {'L': self.window[0], 'K': self.window[1]},
            'estimates': {str(e): self.estimates[e].to_dict() for e in self.event_times()},
        }


def _feasible_units(stacks, ds, e, cohorts):
    units = pd.Index([], dtype=object)
    for stack in stacks:
        if stack.g in cohorts:
            diffs = stack.long_differences(ds, stack.time_of(e))
            for series in diffs.values():
                units = units.union(series.index)
    return len(units)


def event_study(stacks, ds: PanelDataset, scheme=None):
    """
    Stacked event study at every e in [-L, K] except -1.

    Event-times where no stack is feasible are left out of the result.
    """
    from inference.influence import stack_influence

    scheme = WeightScheme.parse(ddd_setting('WEIGHT_SCHEME') if scheme is None else scheme)
    stacks = list(stacks)
    tables = tuple(stack_event_study(stack, ds) for stack in stacks)
    L = max((stack.spec.L for stack in stacks), default=0)
    K = max((stack.spec.K for stack in stacks), default=0)

    estimates = {}
    for e in range(-L, K + 1):
        if e == -1:
            continue
        feasible = [table for table in tables if table.feasible(e)]
        if not feasible:
            logger.info(f'No stack feasible at event-time {e}; left out of the event study')
            continue
        variances = None
        if scheme.kind == 'precision':
            variances = {}
            for stack in stacks:
                if stack.g in {table.g for table in feasible}:
                    psi = stack_influence(stack, ds, e)
                    variances[stack.g] = float((psi ** 2).mean()) / len(psi)
        estimate, weights = aggregate(tables, scheme, e, variances)
        estimates[e] = EventTimeEstimate(
            estimate=estimate,
            weights_used=MappingProxyType(weights),
            n_effective=_feasible_units(stacks, ds, e, set(weights)),
        )
    return EventStudyResult(
        estimates=MappingProxyType(estimates),
        scheme=scheme,
        window=(L, K),
        tables=tables,
    )

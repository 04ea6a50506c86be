"""
Within-stack saturated regression and per-stack event studies.

Everything here is computed from the four cell means of long differences;
the saturated regression's coefficients have closed forms in those means.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import pandas as pd

from panel.datasets import PanelDataset, cell_mean
from stacks.builders import ROLES, Role, Stack
from stacked_ddd.exceptions import EmptyCellError, WeightError

logger = logging.getLogger(__name__)

TE = Role.TREATED_ELIGIBLE
TI = Role.TREATED_INELIGIBLE
CE = Role.COMPARISON_ELIGIBLE
CI = Role.COMPARISON_INELIGIBLE


@dataclass(frozen=True)
class SaturatedCoefficients:
    """Coefficients of the saturated regression of dy on group, eligibility and their product.

    mu is the comparison-ineligible mean, lambda_ the treated-group shift,
    eta the eligibility shift and tau_sat the interaction.
    """
    mu: float
    lambda_: float
    eta: float
    tau_sat: float
    cell_means: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    cell_counts: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def fitted(self, role):
        value = self.mu
        if role.treated_group:
            value += self.lambda_
        if role.eligible:
            value += self.eta
        if role is TE:
            value += self.tau_sat
        return value

    @classmethod
    def from_cell_means(cls, means, counts=None):
        mu = means[CI]
        return cls(
            mu=mu,
            lambda_=means[TI] - means[CI],
            eta=means[CE] - means[CI],
            tau_sat=(means[TE] - means[TI]) - (means[CE] - means[CI]),
            cell_means=MappingProxyType(dict(means)),
            cell_counts=MappingProxyType(dict(counts or {})),
        )


def saturated_ols(stack: Stack, ds: PanelDataset, t):
    """Closed-form saturated regression in stack g at calendar time t."""
    means, counts = {}, {}
    for role in ROLES:
        try:
            cell = cell_mean(ds, stack.cells[role], t, stack.baseline)
        except EmptyCellError as exc:
            raise EmptyCellError(stack.cell_label(role), f'no usable units at t={t} in stack g={stack.g}') from exc
        means[role] = cell.mean
        counts[role] = cell.count
    return SaturatedCoefficients.from_cell_means(means, counts)


# ============================================
# PER-STACK EVENT STUDY
# ============================================

@dataclass(frozen=True)
class AttEntry:
    estimate: float
    cell_counts: MappingProxyType
    feasible: bool

    def count(self, role):
        return self.cell_counts.get(role, 0)


@dataclass(frozen=True, eq=False)
class StackAttTable:
    """Triple-difference estimates of one stack at every e in [-L, K]."""
    g: int
    g_c: object
    entries: MappingProxyType
    roster_counts: MappingProxyType
    n_units: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def event_times(self):
        return sorted(self.entries)

    def feasible(self, e):
        entry = self.entries.get(e)
        return entry is not None and entry.feasible

    def estimate(self, e):
        return self.entries[e].estimate

    def pre_periods(self):
        """Feasible e < -1; e = -1 is the normalization and carries no information."""
        return [e for e in self.event_times() if e < -1 and self.feasible(e)]

    def to_frame(self):
        rows = []
        for e in self.event_times():
            entry = self.entries[e]
            row = {'g': self.g, 'g_c': str(self.g_c), 'e': e, 'estimate': entry.estimate, 'feasible': entry.feasible}
            row.update({role.short: entry.count(role) for role in ROLES})
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self):
        return {
            'g': self.g,
            'g_c': self.g_c.to_json(),
            'roster_counts': {role.short: n for role, n in self.roster_counts.items()},
            'entries': [
                {
                    'e': e,
                    'estimate': None if math.isnan(entry.estimate) else entry.estimate,
                    'feasible': entry.feasible,
                    'cell_counts': {role.short: entry.count(role) for role in ROLES},
                }
                for e, entry in sorted(self.entries.items())
            ],
        }


def stack_event_study(stack: Stack, ds: PanelDataset):
    """tau_sat of stack g at every event-time of its nominal window.

    Event-times cut off by window truncation or left without usable units in
    some cell are kept with feasible=False and a NaN estimate.
    """
    entries = {}
    for e in range(-stack.spec.L, stack.spec.K + 1):
        t = stack.time_of(e)
        if not stack.in_window(e):
            entries[e] = AttEntry(float('nan'), MappingProxyType({role: 0 for role in ROLES}), False)
            continue
        counts = MappingProxyType(stack.usable_counts(ds, t))
        feasible = all(n > 0 for n in counts.values())
        if not feasible:
            entries[e] = AttEntry(float('nan'), counts, False)
        elif e == -1:
            entries[e] = AttEntry(0.0, counts, True)
        else:
            entries[e] = AttEntry(saturated_ols(stack, ds, t).tau_sat, counts, True)

    infeasible = [e for e, entry in entries.items() if not entry.feasible and stack.in_window(e)]
    if infeasible:
        logger.warning(f'Stack g={stack.g}: event-time(s) {infeasible} infeasible (empty usable cell)')
    return StackAttTable(
        g=stack.g,
        g_c=stack.g_c,
        entries=MappingProxyType(entries),
        roster_counts=MappingProxyType(stack.cell_counts),
        n_units=MappingProxyType({e: sum(entry.cell_counts.values()) for e, entry in entries.items()}),
    )


# ============================================
# FWL WEIGHTS
# ============================================

def harmonic_cell_variance(counts):
    """(1/n_g1 + 1/n_g0 + 1/n_gc1 + 1/n_gc0)^-1, the FWL residual variance of a stack."""
    return 1.0 / sum(1.0 / counts[role] for role in ROLES)


def fwl_weights(tables, e):
    """Weights the fully saturated pooled regression puts on each stack at e."""
    feasible = [table for table in tables if table.feasible(e)]
    if not feasible:
        raise WeightError(f'no stack is feasible at event-time {e}')
    variances = {table.g: harmonic_cell_variance(table.entries[e].cell_counts) for table in feasible}
    total = sum(variances.values())
    return {g: v / total for g, v in variances.items()}

"""
Influence functions, plug-in and cluster-robust variances, pointwise CIs.

Scaling conventions:
    psi    per stack; tau_hat_g - tau_g ~ n_g^-1 * sum(psi)
    phi    aggregated over stacks at e; ES_hat(e) - ES(e) ~ n^-1 * sum(phi)
           with n the number of unique units across the feasible stacks
    V_hat  n^-1 * sum(phi^2); the CI half-width is z * sqrt(V_hat / n)
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import pandas as pd
from scipy.stats import norm

from panel.datasets import PanelDataset
from stacks.builders import ROLES, Stack, StackedDataset
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import FeasibilityError, MissingInputError, ParameterError, WeightError

logger = logging.getLogger(__name__)


# ============================================
# PER-STACK INFLUENCE
# ============================================

def stack_influence(stack: Stack, ds: PanelDataset, e):
    """
    psi for every usable member of stack g at event-time e.

    A unit in cell (s, q) gets sign(s, q) / pi(s, q) times its deviation from
    the cell mean, where pi is the usable cell share of the stack. Units
    outside the stack (or unusable at e) have psi = 0 and are not listed.
    """
    counts = stack.require_feasible(ds, e)
    n_g = sum(counts.values())
    diffs = stack.long_differences(ds, stack.time_of(e))
    parts = []
    for role in ROLES:
        cell = diffs[role]
        parts.append(role.sign * (n_g / len(cell)) * (cell - cell.mean()))
    psi = pd.concat(parts)
    psi.name = 'psi'
    return psi


def stack_variance(stack: Stack, ds: PanelDataset, e):
    """Asymptotic within-stack variance n_g^-1 * sum(psi^2) at e."""
    psi = stack_influence(stack, ds, e)
    return float(np.mean(psi.to_numpy() ** 2))


def _normalize_weights(weights, e):
    resolved = {}
    for key, value in weights.items():
        if isinstance(key, tuple):
            g, key_e = key
            if key_e != e:
                continue
        else:
            g = key
        resolved[int(g)] = float(value)
    if not resolved:
        raise WeightError(f'no aggregation weights given for event-time {e}')
    if any(w < 0 for w in resolved.values()):
        raise WeightError(f'negative aggregation weight at event-time {e}')
    total = math.fsum(resolved.values())
    if abs(total - 1.0) > ddd_setting('WEIGHT_TOLERANCE'):
        raise WeightError(f'aggregation weights at event-time {e} sum to {total!r}, not 1')
    return resolved


def aggregated_influence(stacks, ds: PanelDataset, weights, e):
    """
    phi_i(e) = sum over stacks g containing i of (n * w_g / n_g) * psi_g(i).

    Args:
        stacks: iterable of Stack
        weights: map g -> w_g, or (g, e) -> w_g, summing to one at e
        e: event-time

    Returns:
        pd.Series indexed by the unique units of the stacks with positive
        weight; its length is the n used in the scaling.
    """
    resolved = _normalize_weights(weights, e)
    by_cohort = {stack.g: stack for stack in stacks}
    missing = set(resolved) - set(by_cohort)
    if missing:
        raise WeightError(f'weights given for cohort(s) without a stack: {sorted(missing)}')

    contributions = {}
    for g, w in resolved.items():
        if w == 0:
            continue
        psi = stack_influence(by_cohort[g], ds, e)
        contributions[g] = (w, psi)

    units = pd.Index([], dtype=object, name='unit')
    for _, psi in contributions.values():
        units = units.union(psi.index)
    n = len(units)
    phi = pd.Series(0.0, index=units, name='phi')
    for w, psi in contributions.values():
        phi = phi.add((n * w / len(psi)) * psi, fill_value=0.0)
    return phi


def plugin_variance(phi, n=None):
    """n^-1 * sum(phi^2); units absent from phi count as zeros when n is larger."""
    values = np.asarray(phi, dtype=float)
    n = len(values) if n is None else int(n)
    if n <= 0:
        raise MissingInputError('plug-in variance needs at least one unit')
    if n < len(values):
        raise ParameterError(f'n={n} is smaller than the number of influence values ({len(values)})')
    return float(np.sum(values ** 2) / n)


def pointwise_ci(estimate, v, n, alpha=None):
    """estimate +/- z_{1-alpha/2} * sqrt(v / n) using scipy's normal quantile."""
    alpha = ddd_setting('ALPHA') if alpha is None else alpha
    if not 0 < alpha < 1:
        raise ParameterError(f'alpha must lie in (0, 1), got {alpha}')
    if v < 0:
        raise ParameterError(f'variance must be non-negative, got {v}')
    if n <= 0:
        raise ParameterError(f'n must be positive, got {n}')
    half = norm.ppf(1 - alpha / 2) * math.sqrt(v / n)
    return (estimate - half, estimate + half)


# ============================================
# INFLUENCE TABLE
# ============================================

@dataclass(frozen=True, eq=False)
class InfluenceTable:
    """phi per event-time plus the per-(stack, e) psi they were built from."""
    phi: MappingProxyType
    psi: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def event_times(self):
        return sorted(self.phi)

    def n(self, e):
        return len(self.phi[e])

    def units(self):
        index = pd.Index([], dtype=object, name='unit')
        for series in self.phi.values():
            index = index.union(series.index)
        return index.sort_values()

    def matrix(self, event_times=None):
        """Units x event-times frame of phi, zero-filled."""
        event_times = self.event_times() if event_times is None else list(event_times)
        units = self.units()
        return pd.DataFrame(
            {e: self.phi[e].reindex(units, fill_value=0.0) for e in event_times},
            index=units,
        )


def influence_table(stacks, ds: PanelDataset, weights_by_e):
    """Build phi for every e in weights_by_e (a map e -> {g: w})."""
    stacks = list(stacks)
    phi, psi = {}, {}
    for e, weights in sorted(weights_by_e.items()):
        phi[e] = aggregated_influence(stacks, ds, weights, e)
        for stack in stacks:
            if weights.get(stack.g, 0) > 0:
                psi[(stack.g, e)] = stack_influence(stack, ds, e)
    return InfluenceTable(phi=MappingProxyType(phi), psi=MappingProxyType(psi))


# ============================================
# CLUSTER-ROBUST VARIANCE
# ============================================

def crve_variance(stacked: StackedDataset, stacks, e, df_correction=None):
    """
    Unit-clustered sandwich variance of the pooled saturated coefficient at e.

    Scores s_i = sum over stacks of R_tilde * eps_hat, where R_tilde is the
    cell-constant FWL residual sign * V_g / n_cell and eps_hat the pooled
    regression residual. Scores are summed per original unit before squaring.
    Returns the variance of tau_hat(e) itself (comparable to V_hat / n).
    """
    df_correction = ddd_setting('CRVE_DF_CORRECTION') if df_correction is None else df_correction
    wanted = {stack.g for stack in stacks}
    rows = stacked.rows_at(e)
    rows = rows[rows['stack'].isin(wanted)]
    if rows.empty:
        raise FeasibilityError(f'no stacked rows at event-time {e}')

    cells = rows.groupby(['stack', 'role'])['dy'].agg(['mean', 'count'])
    signs = {role.value: role.sign for role in ROLES}
    per_stack = {}
    for g, block in cells.groupby(level='stack'):
        block = block.droplevel('stack')
        if len(block) < len(ROLES):
            continue
        V = 1.0 / float((1.0 / block['count']).sum())
        tau = float(sum(signs[role] * block.loc[role, 'mean'] for role in block.index))
        per_stack[int(g)] = (V, tau)
    if not per_stack:
        raise FeasibilityError(f'no stack is feasible at event-time {e}')

    total_V = sum(V for V, _ in per_stack.values())
    tau_pooled = sum(V * tau for V, tau in per_stack.values()) / total_V

    rows = rows[rows['stack'].isin(per_stack)]
    keyed = rows.join(cells, on=['stack', 'role'])
    sign = keyed['role'].map(signs).to_numpy(dtype=float)
    V_g = keyed['stack'].map({g: V for g, (V, _) in per_stack.items()}).to_numpy()
    gap = keyed['stack'].map({g: tau - tau_pooled for g, (_, tau) in per_stack.items()}).to_numpy()
    r_tilde = sign * V_g / keyed['count'].to_numpy()
    eps_hat = keyed['dy'].to_numpy() - keyed['mean'].to_numpy() + r_tilde * gap

    scores = pd.Series(r_tilde * eps_hat, index=keyed['unit'].to_numpy()).groupby(level=0).sum()
    v = float(np.sum(scores.to_numpy() ** 2)) / total_V ** 2
    if df_correction:
        clusters = len(scores)
        if clusters > 1:
            v *= clusters / (clusters - 1)
    return v


# ============================================
# VARIANCE SUMMARY
# ============================================

@dataclass(frozen=True)
class VarianceEntry:
    v_plugin: float
    n: int
    v_crve: float | None = None

    @property
    def se(self):
        return math.sqrt(self.v_plugin / self.n)

    @property
    def se_crve(self):
        return None if self.v_crve is None else math.sqrt(self.v_crve)

    def to_dict(self):
        return {
            'v_plugin': self.v_plugin,
            'v_crve': self.v_crve,
            'se': self.se,
            'se_crve': self.se_crve,
            'n': self.n,
        }


@dataclass(frozen=True)
class VarianceEstimate:
    entries: MappingProxyType

    def __getitem__(self, e):
        return self.entries[e]

    def event_times(self):
        return sorted(self.entries)

    def to_dict(self):
        return {str(e): self.entries[e].to_dict() for e in self.event_times()}


def variance_estimate(table: InfluenceTable, stacked=None, stacks=None, df_correction=None):
    """Plug-in variance at every e of the influence table, with CRVE when stacked rows are given."""
    entries = {}
    for e in table.event_times():
        phi = table.phi[e]
        v_crve = None
        if stacked is not None and stacks is not None:
            v_crve = crve_variance(stacked, stacks, e, df_correction=df_correction)
        entries[e] = VarianceEntry(v_plugin=plugin_variance(phi), n=len(phi), v_crve=v_crve)
    return VarianceEstimate(MappingProxyType(entries))

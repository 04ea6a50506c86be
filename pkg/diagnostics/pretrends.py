"""
Pre-trend Wald tests on per-stack event-study coefficients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.stats import chi2

from inference.influence import stack_influence
from panel.datasets import PanelDataset
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import DegenerateTestError, MissingInputError

logger = logging.getLogger(__name__)


def _pre_keys(att):
    return [(table.g, e) for table in att for e in table.pre_periods()]


def pretrend_covariance(stacks, ds: PanelDataset, tables):
    """
    Joint covariance of the pre-period coefficients tau_hat[g, e], e < -1.

    Each coefficient's per-unit contribution is psi_g(e) / n_g; contributions
    of a unit shared by several stacks line up on the same row, so shared
    comparison units enter the off-diagonal terms.
    """
    by_cohort = {stack.g: stack for stack in stacks}
    keys = _pre_keys(tables)
    columns = {}
    for g, e in keys:
        if g not in by_cohort:
            raise MissingInputError(f'no stack for cohort {g}')
        psi = stack_influence(by_cohort[g], ds, e)
        columns[(g, e)] = psi / len(psi)
    contributions = pd.DataFrame(columns).fillna(0.0)
    matrix = contributions.to_numpy(dtype=float)
    covariance = matrix.T @ matrix
    index = pd.MultiIndex.from_tuples(keys, names=['g', 'e']) if keys else pd.MultiIndex.from_tuples([], names=['g', 'e'])
    return pd.DataFrame(covariance, index=index, columns=index)


def pretrend_variances(stacks, ds: PanelDataset, tables):
    """Diagonal of pretrend_covariance as a (g, e) -> variance map."""
    covariance = pretrend_covariance(stacks, ds, tables)
    return {key: float(covariance.loc[key, key]) for key in covariance.index}


@dataclass(frozen=True)
class PreTrendEntry:
    estimate: float
    se: float

    def to_dict(self):
        return {'estimate': self.estimate, 'se': self.se}


@dataclass(frozen=True)
class PreTrendReport:
    entries: MappingProxyType
    joint_statistic: float
    dof: int
    p_value: float
    method: str

    def rejects(self, alpha=None):
        alpha = ddd_setting('ALPHA') if alpha is None else alpha
        return self.dof > 0 and self.p_value < alpha

    def to_dict(self):
        return {
            'method': self.method,
            'joint_statistic': self.joint_statistic,
            'dof': self.dof,
            'p_value': self.p_value,
            'entries': [
                {'g': g, 'e': e, **entry.to_dict()} for (g, e), entry in sorted(self.entries.items())
            ],
        }


def pretrend_test(att, variances=None, covariance=None):
    """
    Wald test that every pre-period coefficient (e < -1) is zero.

    Args:
        att: iterable of StackAttTable
        variances: map (g, e) -> variance of tau_hat[g, e]; treats the
            coefficients as independent
        covariance: DataFrame from pretrend_covariance; used instead of
            variances when given

    Returns:
        PreTrendReport. dof is the rank of the covariance of the tested
        coefficients; zero-variance coefficients that are exactly zero are
        left out of it.
    """
    att = list(att)
    keys = _pre_keys(att)
    estimates = np.array([table.estimate(e) for table in att for e in table.pre_periods()], dtype=float)
    tol = ddd_setting('WEIGHT_TOLERANCE')

    if covariance is not None:
        method = 'joint'
        index = pd.MultiIndex.from_tuples(keys, names=['g', 'e']) if keys else None
        try:
            matrix = covariance.loc[index, index].to_numpy(dtype=float) if keys else np.zeros((0, 0))
        except KeyError as exc:
            raise MissingInputError(f'covariance lacks pre-period coefficient {exc.args[0]}') from exc
    elif variances is not None:
        method = 'diagonal'
        try:
            matrix = np.diag([float(variances[key]) for key in keys]) if keys else np.zeros((0, 0))
        except KeyError as exc:
            raise MissingInputError(f'no variance for pre-period coefficient {exc.args[0]}') from exc
    else:
        raise MissingInputError('pretrend_test needs variances or a covariance matrix')

    if not keys:
        logger.info('No pre-period coefficient before e=-1; nothing to test')
        return PreTrendReport(MappingProxyType({}), 0.0, 0, 1.0, method)

    for key, estimate, v in zip(keys, estimates, np.diag(matrix)):
        if v <= 0 and abs(estimate) > tol:
            raise DegenerateTestError(
                f'pre-period coefficient (g={key[0]}, e={key[1]}) = {estimate!r} has zero variance'
            )

    eigenvalues, eigenvectors = scipy.linalg.eigh(matrix)
    largest = float(np.max(eigenvalues))
    positive = eigenvalues > ddd_setting('RANK_TOLERANCE') * largest if largest > 0 else np.zeros(len(keys), dtype=bool)
    projected = eigenvectors.T @ estimates
    if np.any(np.abs(projected[~positive]) > tol):
        raise DegenerateTestError('pre-period coefficients vary along a direction with zero estimated variance')

    statistic = float(np.sum(projected[positive] ** 2 / eigenvalues[positive]))
    dof = int(np.sum(positive))
    p_value = float(chi2.sf(statistic, dof)) if dof else 1.0

    entries = {
        key: PreTrendEntry(float(estimate), math.sqrt(max(float(matrix[k, k]), 0.0)))
        for k, (key, estimate) in enumerate(zip(keys, estimates))
    }
    logger.info(f'Pre-trend test ({method}): W={statistic:.4f}, dof={dof}, p={p_value:.4f}')
    return PreTrendReport(MappingProxyType(entries), statistic, dof, p_value, method)

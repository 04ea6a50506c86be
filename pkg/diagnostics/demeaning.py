"""
Fixed-effect demeaning for pooled event-study specifications.

Residuals are computed by alternating projections: subtract group means
over each fixed-effect margin in turn until every margin's group means
vanish. On balanced panels this reproduces the one-shot
inclusion-exclusion formula.
"""
from __future__ import annotations

import logging
from enum import Enum

import numpy as np
import pandas as pd

from panel.datasets import PanelDataset
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import ConvergenceError, MissingInputError, ParameterError

logger = logging.getLogger(__name__)


class SpecKind(Enum):
    HW_STYLE = 'hw_style'
    PLAIN_3WFE = 'plain_3wfe'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ParameterError(f'unknown specification {value!r}; use hw_style or plain_3wfe') from None

    @property
    def margins(self):
        """Fixed-effect margins as column groups of the observation frame."""
        if self is SpecKind.HW_STYLE:
            return (('unit',), ('cohort_key', 'time'), ('eligible', 'time'))
        return (('unit',), ('time',), ('cohort_key', 'time'))


def observation_frame(ds: PanelDataset):
    """Observed (unit, time) cells with cohort, eligibility and relative time."""
    frame = ds.to_long().dropna(subset=['outcome']).reset_index(drop=True)
    cohort = frame['cohort'].astype('float64')
    frame['cohort_key'] = cohort.fillna(np.inf)
    frame['rel'] = frame['time'] - cohort
    frame['eligible'] = frame['eligible'].astype(bool)
    return frame


class Demeaner:
    """Residual-maker for one specification over a fixed set of observations."""

    def __init__(self, frame, spec, tolerance=None, max_iter=None):
        self.spec = SpecKind.parse(spec)
        self.tolerance = ddd_setting('DEMEAN_TOLERANCE') if tolerance is None else tolerance
        self.max_iter = ddd_setting('DEMEAN_MAX_ITER') if max_iter is None else max_iter
        self.codes = []
        self.counts = []
        for columns in self.spec.margins:
            codes = frame.groupby(list(columns), sort=False).ngroup().to_numpy()
            self.codes.append(codes)
            self.counts.append(np.bincount(codes).astype(float))
        self.n_obs = len(frame)

    def __call__(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            return np.column_stack([self(values[:, k]) for k in range(values.shape[1])])
        if len(values) != self.n_obs:
            raise ParameterError(f'expected {self.n_obs} values, got {len(values)}')

        residual = values.copy()
        scale = max(1.0, float(np.max(np.abs(residual)))) if residual.size else 1.0
        for iteration in range(1, self.max_iter + 1):
            change = 0.0
            for codes, counts in zip(self.codes, self.counts):
                means = np.bincount(codes, weights=residual, minlength=len(counts)) / counts
                residual -= means[codes]
                change = max(change, float(np.max(np.abs(means))))
            if change <= self.tolerance * scale:
                return residual
        raise ConvergenceError(
            f'{self.spec.value} demeaning did not converge in {self.max_iter} iterations '
            f'(last change {change:.3e})'
        )


def demean(values, ds: PanelDataset, spec=SpecKind.HW_STYLE):
    """
    Residuals of values after absorbing the specification's fixed effects.

    Args:
        values: Series indexed by (unit, time), or a units x times frame
            shaped like ds.outcomes; must cover every observed cell
        ds: PanelDataset whose observed cells define the sample
        spec: SpecKind or its string name

    Returns:
        pd.Series of residuals indexed by (unit, time) over observed cells
    """
    frame = observation_frame(ds)
    if isinstance(values, pd.DataFrame):
        values = values.stack(future_stack=True)
    values = pd.Series(values)
    values.index = pd.MultiIndex.from_arrays(
        [values.index.get_level_values(0).astype(str), values.index.get_level_values(1).astype(int)],
        names=['unit', 'time'],
    )
    key = pd.MultiIndex.from_frame(frame[['unit', 'time']])
    aligned = values.reindex(key)
    if aligned.isna().any():
        unit, time = aligned.index[aligned.isna().argmax()]
        raise MissingInputError(f'no value for observed cell (unit={unit}, time={time})')

    residual = Demeaner(frame, spec)(aligned.to_numpy())
    return pd.Series(residual, index=key, name='residual')

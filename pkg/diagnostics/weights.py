"""
Implicit weights of pooled fixed-effects event-study regressions.

Each cohort-specific indicator R_{g,l} = 1{S=g, Q=1, t-g=l} is projected on
the demeaned aggregate indicators R_j (j in the included event-times). The
projection coefficients omega[g, l, j] decompose the pooled coefficient at j
into a weighted sum of cohort-level effects.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import pandas as pd
import scipy.linalg

from panel.datasets import PanelDataset
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import CollinearityError, CoverageError, MissingInputError, ParameterError

from .demeaning import Demeaner, SpecKind, observation_frame

logger = logging.getLogger(__name__)

NORMALIZED_PERIOD = -1


# ============================================
# GRAM SYSTEM
# ============================================

def _included_event_times(window):
    L, K = window
    return [j for j in range(-int(L), int(K) + 1) if j != NORMALIZED_PERIOD]


def _window(window):
    if window is None:
        return (ddd_setting('WINDOW_L'), ddd_setting('WINDOW_K'))
    L, K = window
    if int(L) < 1 or int(K) < 0:
        raise ParameterError(f'window needs L >= 1 and K >= 0, got L={L}, K={K}')
    return (int(L), int(K))


def _check_rank(gram, event_times):
    """Raise CollinearityError naming the event-times QR pivoting leaves out."""
    _, r, pivots = scipy.linalg.qr(gram, pivoting=True)
    diagonal = np.abs(np.diag(r))
    if not diagonal.size or diagonal[0] == 0:
        raise CollinearityError(event_times)
    rank = int(np.sum(diagonal > ddd_setting('RANK_TOLERANCE') * diagonal[0]))
    if rank < len(event_times):
        raise CollinearityError(sorted(event_times[p] for p in pivots[rank:]))


@dataclass(frozen=True, eq=False)
class _Design:
    frame: pd.DataFrame
    event_times: tuple
    indicators: np.ndarray
    demeaned: np.ndarray
    gram: np.ndarray
    n_units: int
    dropped: tuple


def _design(ds: PanelDataset, spec, window):
    spec = SpecKind.parse(spec)
    window = _window(window)
    frame = observation_frame(ds)
    treated = frame['eligible'] & frame['rel'].notna()

    event_times, dropped = [], []
    for j in _included_event_times(window):
        if (treated & (frame['rel'] == j)).any():
            event_times.append(j)
        else:
            dropped.append(j)
    if dropped:
        logger.warning(f'Event-time(s) {dropped} never realized in the panel; left out of the pooled regression')
    if not event_times:
        raise MissingInputError('no included event-time is realized by any treated-eligible cell')

    indicators = np.column_stack([(treated & (frame['rel'] == j)).to_numpy(dtype=float) for j in event_times])
    demeaned = Demeaner(frame, spec)(indicators)
    n_units = ds.n_units
    gram = demeaned.T @ demeaned / n_units
    _check_rank(gram, event_times)
    return _Design(
        frame=frame,
        event_times=tuple(event_times),
        indicators=indicators,
        demeaned=demeaned,
        gram=gram,
        n_units=n_units,
        dropped=tuple(dropped),
    )


# ============================================
# AUXILIARY WEIGHTS
# ============================================

@dataclass(frozen=True, eq=False)
class AuxWeightTable:
    omega: MappingProxyType
    event_times_included: tuple
    partial_residual_variance: MappingProxyType
    spec: SpecKind
    window: tuple
    cohorts: tuple
    relative_times: MappingProxyType
    has_never: bool = False
    dropped_event_times: tuple = ()
    never_omega: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def weight(self, g, ell, j):
        return self.omega.get((g, ell, j), 0.0)

    def own_weights(self, j):
        return {g: self.weight(g, j, j) for g in self.cohorts if j in self.relative_times[g]}

    def is_full_window(self):
        """True when every realized relative time other than -1 is an included event-time."""
        realized = set().union(*self.relative_times.values()) if self.relative_times else set()
        return realized - {NORMALIZED_PERIOD} <= set(self.event_times_included)

    def to_frame(self):
        rows = [
            {'g': str(g), 'ell': ell, 'j': j, 'omega': value}
            for (g, ell, j), value in sorted(self.omega.items())
        ]
        if self.has_never:
            rows += [
                {'g': 'never', 'ell': None, 'j': j, 'omega': self.never_omega.get(j, 0.0)}
                for j in self.event_times_included
            ]
        return pd.DataFrame(rows, columns=['g', 'ell', 'j', 'omega'])

    def to_dict(self):
        return {
            'spec': self.spec.value,
            'window': {'L': self.window[0], 'K': self.window[1]},
            'event_times_included': list(self.event_times_included),
            'dropped_event_times': list(self.dropped_event_times),
            'partial_residual_variance': {str(j): v for j, v in sorted(self.partial_residual_variance.items())},
            'omega': [
                {'g': g, 'ell': ell, 'j': j, 'omega': value}
                for (g, ell, j), value in sorted(self.omega.items())
            ],
        }


def _never_treated_weights(design):
    """Projection of the never-treated rows' event-time indicator mass; zero unless they are mislabeled."""
    never = design.frame['cohort'].isna().to_numpy()
    if not never.any():
        return {}
    exposure = design.indicators[never].sum(axis=1)
    moment = design.demeaned[never].T @ exposure / design.n_units
    coefficients = scipy.linalg.solve(design.gram, moment, assume_a='sym')
    return {j: float(value) for j, value in zip(design.event_times, coefficients)}


def aux_weights(ds: PanelDataset, spec=SpecKind.HW_STYLE, window=None):
    """
    Implicit weights omega[g, l, j] of the pooled event-study regression.

    Args:
        ds: PanelDataset with at least one treated cohort
        spec: hw_style or plain_3wfe
        window: (L, K); event-times -L..K except -1 enter the regression

    Returns:
        AuxWeightTable
    """
    design = _design(ds, spec, window)
    frame = design.frame
    gram_inv = scipy.linalg.inv(design.gram)

    treated = frame[frame['eligible'] & frame['rel'].notna()]
    omega, relative_times = {}, {}
    for (g, ell), rows in treated.groupby(['cohort', 'rel'], sort=True):
        g, ell = int(g), int(ell)
        relative_times.setdefault(g, set()).add(ell)
        moment = design.demeaned[rows.index.to_numpy()].sum(axis=0) / design.n_units
        coefficients = scipy.linalg.solve(design.gram, moment, assume_a='sym')
        for j, value in zip(design.event_times, coefficients):
            omega[(g, ell, j)] = float(value)

    sigma2 = {j: float(1.0 / gram_inv[k, k]) for k, j in enumerate(design.event_times)}
    never_omega = _never_treated_weights(design)
    logger.info(f'Auxiliary weights computed: spec={SpecKind.parse(spec).value}, event-times {list(design.event_times)}')
    return AuxWeightTable(
        omega=MappingProxyType(omega),
        event_times_included=design.event_times,
        partial_residual_variance=MappingProxyType(sigma2),
        spec=SpecKind.parse(spec),
        window=_window(window),
        cohorts=tuple(sorted(relative_times)),
        relative_times=MappingProxyType({g: frozenset(v) for g, v in relative_times.items()}),
        has_never=ds.has_never,
        dropped_event_times=design.dropped,
        never_omega=MappingProxyType(never_omega),
    )


def pooled_3wfe_event_study(ds: PanelDataset, spec=SpecKind.HW_STYLE, window=None):
    """Coefficients alpha_j of the pooled event-study regression on observed outcomes."""
    design = _design(ds, spec, window)
    outcome = design.frame['outcome'].to_numpy(dtype=float)
    moment = design.demeaned.T @ outcome / design.n_units
    alpha = scipy.linalg.solve(design.gram, moment, assume_a='sym')
    return {j: float(a) for j, a in zip(design.event_times, alpha)}


# ============================================
# WEIGHT PROPERTIES
# ============================================

@dataclass(frozen=True)
class PropertyCheck:
    name: str
    passed: bool
    max_deviation: float
    detail: str = ''

    def to_dict(self):
        return {'name': self.name, 'passed': self.passed, 'max_deviation': self.max_deviation, 'detail': self.detail}


@dataclass(frozen=True)
class WeightPropertyReport:
    checks: tuple
    negative_own_weights: tuple
    tolerance: float

    @property
    def passed(self):
        return all(check.passed for check in self.checks)

    @property
    def contaminated(self):
        return bool(self.negative_own_weights)

    def check(self, name):
        for item in self.checks:
            if item.name == name:
                return item
        raise KeyError(name)

    def to_dict(self):
        return {
            'passed': self.passed,
            'tolerance': self.tolerance,
            'checks': [check.to_dict() for check in self.checks],
            'negative_own_weights': [{'g': g, 'j': j, 'omega': w} for g, j, w in self.negative_own_weights],
        }


def _sum_over_cohorts(table, ell, j):
    return math.fsum(table.weight(g, ell, j) for g in table.cohorts if ell in table.relative_times[g])


def check_weight_properties(table: AuxWeightTable, tol=None):
    """
    Evaluate the weight identities of an AuxWeightTable.

    Reports:
        own_period        sum_g omega[g, j, j] = 1
        cross_period      sum_g omega[g, l, j] = 0 for included l != j
        excluded_periods  sum over excluded l (with -1) of sum_g omega = -1
        reference_period  sum_g omega[g, -1, j] = -1 (full windows only)
        never_treated     never-treated units carry zero weight
    """
    tol = ddd_setting('WEIGHT_TOLERANCE') if tol is None else tol
    included = table.event_times_included
    realized = sorted(set().union(*table.relative_times.values())) if table.relative_times else []
    excluded = [ell for ell in realized if ell not in included]

    deviations = {'own_period': [], 'cross_period': [], 'excluded_periods': [], 'reference_period': []}
    for j in included:
        deviations['own_period'].append(abs(_sum_over_cohorts(table, j, j) - 1.0))
        for ell in included:
            if ell != j:
                deviations['cross_period'].append(abs(_sum_over_cohorts(table, ell, j)))
        deviations['excluded_periods'].append(
            abs(math.fsum(_sum_over_cohorts(table, ell, j) for ell in excluded) + 1.0)
        )
        if NORMALIZED_PERIOD in realized:
            deviations['reference_period'].append(abs(_sum_over_cohorts(table, NORMALIZED_PERIOD, j) + 1.0))

    checks = []
    for name in ('own_period', 'cross_period', 'excluded_periods'):
        worst = max(deviations[name], default=0.0)
        checks.append(PropertyCheck(name, worst <= tol, worst))
    if table.is_full_window():
        worst = max(deviations['reference_period'], default=0.0)
        checks.append(PropertyCheck('reference_period', worst <= tol, worst))
    else:
        worst = max(deviations['reference_period'], default=0.0)
        checks.append(PropertyCheck(
            'reference_period', True, worst,
            'not checked: window leaves out realized relative times',
        ))
    if table.has_never:
        worst = max((abs(w) for w in table.never_omega.values()), default=0.0)
        checks.append(PropertyCheck('never_treated', worst <= tol, worst))
    else:
        checks.append(PropertyCheck('never_treated', True, 0.0, 'not applicable: no never-treated units'))

    negative = tuple(
        (g, j, w) for j in included for g, w in sorted(table.own_weights(j).items()) if w < -tol
    )
    for check in checks:
        if not check.passed:
            logger.warning(f'Weight identity {check.name} fails: max deviation {check.max_deviation:.3e}')
    if negative:
        logger.warning(f'Negative own-period weights: {[(g, j) for g, j, _ in negative]}')
    return WeightPropertyReport(checks=tuple(checks), negative_own_weights=negative, tolerance=tol)


# ============================================
# IMPLIED ESTIMANDS
# ============================================

@dataclass(frozen=True)
class ImpliedEstimand:
    alpha: MappingProxyType
    provenance: str

    def __getitem__(self, j):
        return self.alpha[j]

    def to_dict(self):
        return {'provenance': self.provenance, 'alpha': {str(j): a for j, a in sorted(self.alpha.items())}}


def implied_estimand(table: AuxWeightTable, catt, provenance='user', no_anticipation=False, tol=None):
    """
    alpha_j = sum over (g, l != -1) of omega[g, l, j] * CATT(g, l).

    Args:
        catt: map (g, l) -> effect
        provenance: where the CATT values came from ('user', 'stacked', 'realized')
        no_anticipation: treat missing entries with l < 0 as zero
    """
    tol = ddd_setting('WEIGHT_TOLERANCE') if tol is None else tol
    catt = {(int(g), int(ell)): float(v) for (g, ell), v in catt.items()}
    missing = set()
    alpha = {}
    for j in table.event_times_included:
        terms = []
        for (g, ell, jj), w in table.omega.items():
            if jj != j or ell == NORMALIZED_PERIOD:
                continue
            if (g, ell) in catt:
                terms.append(w * catt[(g, ell)])
            elif no_anticipation and ell < 0:
                continue
            elif abs(w) > tol:
                missing.add((g, ell))
        alpha[j] = math.fsum(terms)
    if missing:
        raise CoverageError(sorted(missing))
    return ImpliedEstimand(alpha=MappingProxyType(alpha), provenance=provenance)


def realized_contrasts(ds: PanelDataset):
    """
    Cell-mean triple differences theta[g, l] against a reference cohort.

    The reference is the never-treated cohort when present, otherwise the
    latest finite cohort (whose own contrasts are zero). On balanced panels
    these reproduce the hw_style pooled coefficients exactly through
    implied_estimand.
    """
    frame = observation_frame(ds)
    means = frame.groupby(['cohort_key', 'eligible', 'time'])['outcome'].mean()
    gap = (means.xs(True, level='eligible') - means.xs(False, level='eligible')).dropna()

    cohorts = ds.cohorts()
    if not cohorts:
        raise MissingInputError('no treated cohort in the panel')
    reference = np.inf if ds.has_never else float(cohorts[-1])
    if reference not in gap.index.get_level_values('cohort_key'):
        raise MissingInputError('reference cohort lacks an eligible or ineligible cell')
    reference_gap = gap.xs(reference, level='cohort_key')

    theta = {}
    for g in cohorts:
        if float(g) == reference:
            theta.update({(g, t - g): 0.0 for t in ds.times})
            continue
        own = gap.xs(float(g), level='cohort_key') if float(g) in gap.index.get_level_values('cohort_key') else None
        if own is None or (g - 1) not in own.index or (g - 1) not in reference_gap.index:
            continue
        for t in own.index:
            if t in reference_gap.index:
                theta[(g, int(t) - g)] = float(
                    (own[t] - own[g - 1]) - (reference_gap[t] - reference_gap[g - 1])
                )
    return theta


# ============================================
# AGGREGATED WEIGHTS
# ============================================

@dataclass(frozen=True, eq=False)
class AggWeightTable:
    Omega: MappingProxyType
    w: MappingProxyType
    normalization: float
    normalization_ok: bool
    negative: tuple = field(default_factory=tuple)

    def to_frame(self):
        return pd.DataFrame(
            [{'g': g, 'ell': ell, 'omega': value} for (g, ell), value in sorted(self.Omega.items())],
            columns=['g', 'ell', 'omega'],
        )

    def to_dict(self):
        return {
            'w': {str(j): v for j, v in sorted(self.w.items())},
            'normalization': self.normalization,
            'normalization_ok': self.normalization_ok,
            'negative': [{'g': g, 'ell': ell} for g, ell in self.negative],
            'Omega': [{'g': g, 'ell': ell, 'omega': v} for (g, ell), v in sorted(self.Omega.items())],
        }


def aggregated_weights(table: AuxWeightTable, w=None, tol=None):
    """
    Omega[g, l] = sum_j w_j * omega[g, l, j] for a post-period average.

    w defaults to equal weights over the included post event-times.
    """
    tol = ddd_setting('WEIGHT_TOLERANCE') if tol is None else tol
    post = [j for j in table.event_times_included if j >= 0]
    if w is None:
        if not post:
            raise ParameterError('no included post-period event-time to aggregate over')
        w = {j: 1.0 / len(post) for j in post}
    w = {int(j): float(v) for j, v in w.items()}
    if not w:
        raise ParameterError('aggregation weights are empty')
    bad = [j for j in w if j not in post]
    if bad:
        raise ParameterError(f'aggregation weights need included post event-times, got {bad}')
    if any(v < 0 for v in w.values()):
        raise ParameterError('aggregation weights must be non-negative')
    if abs(math.fsum(w.values()) - 1.0) > tol:
        raise ParameterError('aggregation weights must sum to one')

    Omega = {}
    for (g, ell, j), value in table.omega.items():
        if j in w:
            Omega[(g, ell)] = Omega.get((g, ell), 0.0) + w[j] * value
    normalization = math.fsum(v for (g, ell), v in Omega.items() if ell >= 0)
    ok = abs(normalization - 1.0) <= tol
    if not ok:
        logger.warning(f'Aggregated post-period weights sum to {normalization:.12f}, not 1')
    negative = tuple(sorted(key for key, v in Omega.items() if v < -tol))
    return AggWeightTable(
        Omega=MappingProxyType(Omega),
        w=MappingProxyType(w),
        normalization=normalization,
        normalization_ok=ok,
        negative=negative,
    )

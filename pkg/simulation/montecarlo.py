"""
Monte Carlo harness: simulate -> estimate -> CI per replication, then
bias, RMSE and coverage against each estimator's own target.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from diagnostics.demeaning import SpecKind
from diagnostics.pretrends import pretrend_covariance, pretrend_test
from diagnostics.weights import pooled_3wfe_event_study
from estimators.aggregation import WeightScheme, event_study
from inference.influence import influence_table, pointwise_ci, variance_estimate
from stacks.builders import build_all_stacks
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import DDDError, ParameterError

from .dgp import DgpConfig, simulate_panel, weighted_truth

logger = logging.getLogger(__name__)

ESTIMATOR_KINDS = ('stacked', 'pooled_3wfe')
# Relative slack for "zero-width interval contains the truth"
COVERAGE_SLACK = 1e-9


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str = 'stacked'
    scheme: WeightScheme | None = None
    spec: SpecKind | None = None

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ParameterError(f'unknown estimator kind {self.kind!r}; use stacked or pooled_3wfe')
        if self.kind == 'stacked':
            object.__setattr__(self, 'scheme', WeightScheme.parse(self.scheme or 'fwl'))
            object.__setattr__(self, 'spec', None)
        else:
            object.__setattr__(self, 'spec', SpecKind.parse(self.spec or SpecKind.HW_STYLE))
            object.__setattr__(self, 'scheme', None)

    @property
    def name(self):
        if self.kind == 'stacked':
            return f'stacked:{self.scheme}'
        return f'pooled_3wfe:{self.spec.value}'

    @classmethod
    def parse(cls, value):
        """'stacked:cohort', 'stacked', 'pooled_3wfe:plain_3wfe', or a dict."""
        if isinstance(value, EstimatorSpec):
            return value
        if isinstance(value, dict):
            return cls(kind=value.get('kind', 'stacked'), scheme=value.get('scheme'), spec=value.get('spec'))
        kind, _, option = str(value).partition(':')
        if kind == 'stacked':
            return cls(kind, scheme=option or None)
        return cls(kind, spec=option or None)

    def to_dict(self):
        if self.kind == 'stacked':
            return {'kind': self.kind, 'scheme': self.scheme.to_dict()}
        return {'kind': self.kind, 'spec': self.spec.value}


def _truth_weights(cfg, spec, cohorts, realized=None):
    if spec.kind == 'stacked' and spec.scheme.kind == 'equal':
        return {g: 1.0 for g in cohorts}
    if spec.kind == 'stacked' and spec.scheme.kind == 'custom':
        return {g: spec.scheme.custom[g] for g in cohorts}
    if spec.kind == 'stacked' and spec.scheme.kind in ('fwl', 'precision'):
        return dict(realized)
    return {g: cfg.share(g) * cfg.p(g) for g in cohorts}


def _covers(lower, upper, truth):
    slack = COVERAGE_SLACK * max(1.0, abs(truth))
    return lower - slack <= truth <= upper + slack


# ============================================
# ONE REPLICATION
# ============================================

def _run_stacked(ds, stacks, cfg, spec, alpha):
    result = event_study(stacks, ds, spec.scheme)
    table = influence_table(stacks, ds, result.weights())
    variance = variance_estimate(table)
    out = {}
    for e in result.post_event_times():
        weights = dict(result[e].weights_used)
        truth = weighted_truth(cfg, e, _truth_weights(cfg, spec, list(weights), weights))
        lower, upper = pointwise_ci(result.estimate(e), variance[e].v_plugin, variance[e].n, alpha)
        out[e] = (result.estimate(e), truth, variance[e].se, _covers(lower, upper, truth))
    return out


def _run_pooled(ds, cfg, spec, window):
    alpha_hat = pooled_3wfe_event_study(ds, spec.spec, window)
    out = {}
    for j, estimate in alpha_hat.items():
        if j < 0:
            continue
        cohorts = [g for g in cfg.cohort_ids if g + j <= cfg.T]
        truth = weighted_truth(cfg, j, _truth_weights(cfg, spec, cohorts))
        out[j] = (estimate, truth, None, None)
    return out


def _replicate(cfg, specs, b, window, alpha, with_pretrends):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(b,)))
    ds = simulate_panel(cfg, rng)
    rows, failures, rejections = [], {}, {}

    stacks = None
    try:
        stacks = build_all_stacks(ds, L=window[0], K=window[1])
    except DDDError as exc:
        logger.warning(f'Replication {b}: stack construction failed: {exc}')

    for spec in specs:
        try:
            if spec.kind == 'stacked':
                if stacks is None:
                    raise ParameterError('no stacks available')
                out = _run_stacked(ds, stacks, cfg, spec, alpha)
            else:
                out = _run_pooled(ds, cfg, spec, window)
        except (DDDError, np.linalg.LinAlgError) as exc:
            failures[spec.name] = str(exc)
            continue
        for e, (estimate, truth, se, covered) in out.items():
            rows.append({
                'estimator': spec.name, 'rep': b, 'e': e, 'estimate': estimate,
                'truth': truth,
                'se': np.nan if se is None else se,
                'covered': np.nan if covered is None else float(covered),
            })

    if with_pretrends and stacks:
        tables = event_study(stacks, ds, 'equal').tables
        try:
            covariance = pretrend_covariance(stacks, ds, tables)
            for table in tables:
                if table.pre_periods():
                    rejections[table.g] = pretrend_test([table], covariance=covariance).rejects(alpha)
        except DDDError as exc:
            failures['pretrend'] = str(exc)
    return rows, failures, rejections


# ============================================
# SUMMARY
# ============================================

@dataclass(frozen=True, eq=False)
class McSummary:
    table: pd.DataFrame
    reps: int
    failures: MappingProxyType
    pretrend_rejection: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    estimators: tuple = ()

    def row(self, estimator, e):
        match = self.table[(self.table['estimator'] == estimator) & (self.table['e'] == e)]
        if match.empty:
            raise KeyError((estimator, e))
        return match.iloc[0]

    def to_frame(self):
        return self.table.copy()

    def to_dict(self):
        records = self.table.astype(object).where(self.table.notna(), None).to_dict(orient='records')
        return {
            'reps': self.reps,
            'estimators': [spec.to_dict() for spec in self.estimators],
            'failures': dict(self.failures),
            'pretrend_rejection': {str(g): rate for g, rate in sorted(self.pretrend_rejection.items())},
            'summary': records,
        }


SUMMARY_COLUMNS = ['estimator', 'e', 'mean_bias', 'rmse', 'coverage_95', 'mean_se', 'n_ok']


def _summarize(draws):
    if draws.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    draws = draws.assign(error=draws['estimate'] - draws['truth'])
    grouped = draws.groupby(['estimator', 'e'], sort=True)
    summary = grouped.agg(
        mean_bias=('error', 'mean'),
        rmse=('error', lambda s: math.sqrt(float(np.mean(s.to_numpy() ** 2)))),
        n_ok=('error', 'size'),
    )
    summary['coverage_95'] = grouped['covered'].mean()
    summary['mean_se'] = grouped['se'].mean()
    return summary.reset_index()[SUMMARY_COLUMNS]


def monte_carlo(cfg: DgpConfig, estimator_specs=('stacked:fwl',), reps=100, window=None, alpha=None,
                n_jobs=None, with_pretrends=True):
    """
    Run reps replications of cfg and summarize every estimator spec.

    Replication b draws its panel from SeedSequence(cfg.seed, spawn_key=(b,)),
    so results do not depend on n_jobs. A failing estimator in one
    replication is left out of that replication and counted in failures.
    """
    if reps < 1:
        raise ParameterError(f'reps must be >= 1, got {reps}')
    specs = tuple(EstimatorSpec.parse(spec) for spec in estimator_specs)
    window = (ddd_setting('WINDOW_L'), ddd_setting('WINDOW_K')) if window is None else tuple(window)
    alpha = ddd_setting('ALPHA') if alpha is None else alpha
    n_jobs = ddd_setting('N_JOBS') if n_jobs is None else n_jobs

    results = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(_replicate)(cfg, specs, b, window, alpha, with_pretrends) for b in range(reps)
    )

    rows, failures, rejections = [], {}, {}
    for rep_rows, rep_failures, rep_rejections in results:
        rows += rep_rows
        for name in rep_failures:
            failures[name] = failures.get(name, 0) + 1
        for g, rejected in rep_rejections.items():
            rejections.setdefault(g, []).append(bool(rejected))
    if failures:
        logger.warning(f'Monte Carlo failures by estimator: {failures}')

    draws = pd.DataFrame(rows, columns=['estimator', 'rep', 'e', 'estimate', 'truth', 'se', 'covered'])
    logger.info(f'Monte Carlo done: {reps} replication(s), {len(specs)} estimator(s)')
    return McSummary(
        table=_summarize(draws),
        reps=reps,
        failures=MappingProxyType(failures),
        pretrend_rejection=MappingProxyType({g: float(np.mean(v)) for g, v in rejections.items()}),
        estimators=specs,
    )


def true_targets(cfg: DgpConfig, e, spec='stacked:cohort', cohorts=None):
    """Population target of an estimator spec at e over the given cohorts (all configured by default)."""
    spec = EstimatorSpec.parse(spec)
    cohorts = cfg.cohort_ids if cohorts is None else list(cohorts)
    if spec.kind == 'stacked' and spec.scheme.kind in ('fwl', 'precision'):
        raise ParameterError('fwl and precision targets depend on the realized sample')
    return weighted_truth(cfg, e, _truth_weights(cfg, spec, cohorts))

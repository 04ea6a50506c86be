"""
End-to-end stacked estimation: stacks -> event study -> influence -> variances -> CIs -> band.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from types import MappingProxyType

import pandas as pd

from inference.bootstrap import multiplier_bootstrap
from inference.influence import influence_table, plugin_variance, pointwise_ci, variance_estimate
from panel.datasets import PanelDataset
from stacks.builders import build_all_stacks, materialize_stacked
from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import MissingInputError, ParameterError

from .aggregation import event_study, pooled_event_study

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostEffect:
    estimate: float
    v_plugin: float
    n: int
    ci: tuple
    weights: MappingProxyType

    @property
    def se(self):
        return math.sqrt(self.v_plugin / self.n)

    def to_dict(self):
        return {
            'estimate': self.estimate,
            'v_plugin': self.v_plugin,
            'se': self.se,
            'n': self.n,
            'ci': list(self.ci),
            'weights': {str(e): w for e, w in sorted(self.weights.items())},
        }


def average_post_effect(result, influence, w=None, alpha=None):
    """
    Weighted average of the post-period event-study estimates.

    Args:
        result: EventStudyResult
        influence: InfluenceTable built from the same result
        w: map e -> weight over post event-times; equal weights when omitted

    Returns:
        PostEffect
    """
    post = [e for e in result.post_event_times() if e in influence.phi]
    if not post:
        raise MissingInputError('no post-period event-time to average over')
    if w is None:
        w = {e: 1.0 / len(post) for e in post}
    else:
        w = {int(e): float(v) for e, v in w.items()}
        unknown = set(w) - set(post)
        if unknown:
            raise ParameterError(f'weights given for event-time(s) without an estimate: {sorted(unknown)}')
        if any(v < 0 for v in w.values()):
            raise ParameterError('post-period weights must be non-negative')
        if abs(math.fsum(w.values()) - 1.0) > ddd_setting('WEIGHT_TOLERANCE'):
            raise ParameterError('post-period weights must sum to one')

    estimate = math.fsum(v * result.estimate(e) for e, v in w.items())

    units = pd.Index([], dtype=object, name='unit')
    for e in w:
        units = units.union(influence.phi[e].index)
    n = len(units)
    phi = pd.Series(0.0, index=units)
    for e, v in w.items():
        if v:
            phi = phi.add((n * v / influence.n(e)) * influence.phi[e], fill_value=0.0)

    v_plugin = plugin_variance(phi)
    return PostEffect(
        estimate=estimate,
        v_plugin=v_plugin,
        n=n,
        ci=pointwise_ci(estimate, v_plugin, n, alpha),
        weights=MappingProxyType(w),
    )


# ============================================
# FULL RUN
# ============================================

@dataclass(frozen=True, eq=False)
class EstimationRun:
    stacks: object
    stacked: object
    result: object
    influence: object
    variance: object
    cis: MappingProxyType
    pooled: MappingProxyType
    post_effect: PostEffect | None = None
    band: object = None

    def to_dict(self):
        data = {
            'stacks': self.stacks.to_dict(),
            'event_study': self.result.to_dict(),
            'variance': self.variance.to_dict(),
            'ci': {str(e): list(ci) for e, ci in sorted(self.cis.items())},
            'pooled_regression': {str(e): v for e, v in sorted(self.pooled.items())},
            'post_effect': None if self.post_effect is None else self.post_effect.to_dict(),
            'band': None if self.band is None else self.band.to_dict(),
        }
        return data

    def event_study_frame(self):
        """One row per event-time: estimate, se, CI, and band when present."""
        rows = []
        for e in self.result.event_times():
            entry = self.variance[e] if e in self.variance.entries else None
            row = {
                'e': e,
                'estimate': self.result.estimate(e),
                'se': None if entry is None else entry.se,
                'se_crve': None if entry is None else entry.se_crve,
                'ci_lower': self.cis[e][0] if e in self.cis else None,
                'ci_upper': self.cis[e][1] if e in self.cis else None,
                'n_effective': self.result[e].n_effective,
            }
            if self.band is not None and e in self.band.bands:
                row['band_lower'], row['band_upper'] = self.band.bands[e]
            rows.append(row)
        return pd.DataFrame(rows)


def run_event_study(ds: PanelDataset, rule=None, L=None, K=None, scheme=None, alpha=None,
                    B=None, multiplier=None, seed=None, n_jobs=None, on_infeasible=None,
                    post_weights=None):
    """Build stacks, estimate, and attach variances, CIs and (for B > 0) a simultaneous band."""
    alpha = ddd_setting('ALPHA') if alpha is None else alpha
    B = ddd_setting('BOOTSTRAP_B') if B is None else int(B)

    stacks = build_all_stacks(
        ds,
        rule=ddd_setting('COMPARISON_RULE') if rule is None else rule,
        L=L,
        K=K,
        on_infeasible=ddd_setting('ON_INFEASIBLE') if on_infeasible is None else on_infeasible,
    )
    stacked = materialize_stacked(stacks, ds)
    result = event_study(stacks, ds, scheme)
    table = influence_table(stacks, ds, result.weights())
    variance = variance_estimate(table, stacked=stacked, stacks=list(stacks))

    cis = {
        e: pointwise_ci(result.estimate(e), variance[e].v_plugin, variance[e].n, alpha)
        for e in result.event_times()
    }
    post_effect = None
    if result.post_event_times():
        post_effect = average_post_effect(result, table, post_weights, alpha)

    band = None
    if B > 0:
        band = multiplier_bootstrap(
            table,
            {e: result.estimate(e) for e in result.event_times()},
            B=B, multiplier=multiplier, seed=seed, alpha=alpha, n_jobs=n_jobs,
        )
    else:
        logger.info('Bootstrap disabled (B=0); pointwise CIs only')

    logger.info(f'Event study done: {len(stacks)} stack(s), event-times {result.event_times()}, scheme={result.scheme}')
    return EstimationRun(
        stacks=stacks,
        stacked=stacked,
        result=result,
        influence=table,
        variance=variance,
        cis=MappingProxyType(cis),
        pooled=MappingProxyType(pooled_event_study(stacked, list(stacks))),
        post_effect=post_effect,
        band=band,
    )

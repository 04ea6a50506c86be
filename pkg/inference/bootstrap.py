"""
Multiplier bootstrap for simultaneous event-study bands.

Replication b draws one multiplier per unit from a generator seeded by
SeedSequence(seed, spawn_key=(b,)), so its draws depend only on (seed, b)
and not on how replications are split across workers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm

from stacked_ddd.conf import ddd_setting
from stacked_ddd.exceptions import DegenerateBandError, ParameterError

from .influence import InfluenceTable

logger = logging.getLogger(__name__)

MULTIPLIERS = ('rademacher', 'gaussian')

# Replications handed to a worker at a time
CHUNK_SIZE = 250


@dataclass(frozen=True)
class BandResult:
    bands: MappingProxyType
    critical_value: float
    alpha: float
    B: int
    multiplier: str
    seed: int
    v_boot: MappingProxyType
    covers_pointwise: bool = True

    def to_dict(self):
        return {
            'critical_value': self.critical_value,
            'alpha': self.alpha,
            'B': self.B,
            'multiplier': self.multiplier,
            'seed': self.seed,
            'covers_pointwise': self.covers_pointwise,
            'bands': {
                str(e): {'lower': lower, 'upper': upper, 'v_boot': self.v_boot[e]}
                for e, (lower, upper) in sorted(self.bands.items())
            },
        }


def draw_multipliers(rng, size, multiplier):
    if multiplier == 'rademacher':
        return rng.integers(0, 2, size=size).astype(float) * 2.0 - 1.0
    return rng.standard_normal(size)


def _replicate(seed, replications, phi, scale, multiplier):
    out = np.empty((len(replications), phi.shape[1]))
    for k, b in enumerate(replications):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        xi = draw_multipliers(rng, phi.shape[0], multiplier)
        out[k] = (xi @ phi) * scale
    return out


def bootstrap_draws(table: InfluenceTable, B, multiplier, seed, n_jobs=1, event_times=None):
    """B x E matrix of tau* = n_e^-1 * sum(xi * phi(e)), rows in replication order."""
    event_times = table.event_times() if event_times is None else list(event_times)
    frame = table.matrix(event_times)
    phi = frame.to_numpy(dtype=float)
    scale = 1.0 / np.array([table.n(e) for e in event_times], dtype=float)
    chunks = [range(start, min(start + CHUNK_SIZE, B)) for start in range(0, B, CHUNK_SIZE)]
    parts = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(_replicate)(seed, chunk, phi, scale, multiplier) for chunk in chunks
    )
    return np.vstack(parts) if parts else np.empty((0, len(event_times)))


def critical_index(B, alpha):
    """1-based order statistic ceil((1 - alpha) * B) used for the band quantile."""
    return max(1, math.ceil(round((1 - alpha) * B, 9)))


def multiplier_bootstrap(table: InfluenceTable, estimates, B=None, multiplier=None, seed=None, alpha=None, n_jobs=None):
    """
    Simultaneous band over all event-times in the influence table.

    Args:
        table: InfluenceTable with phi per event-time
        estimates: map e -> point estimate
        B: number of replications (>= 1)
        multiplier: 'rademacher' or 'gaussian'
        seed: master seed
        alpha: band level
        n_jobs: joblib workers; the result does not depend on it

    Returns:
        BandResult
    """
    B = ddd_setting('BOOTSTRAP_B') if B is None else int(B)
    multiplier = ddd_setting('MULTIPLIER') if multiplier is None else multiplier
    seed = ddd_setting('SEED') if seed is None else int(seed)
    alpha = ddd_setting('ALPHA') if alpha is None else alpha
    n_jobs = ddd_setting('N_JOBS') if n_jobs is None else n_jobs

    if B < 1:
        raise ParameterError(f'bootstrap needs B >= 1, got {B}')
    if multiplier not in MULTIPLIERS:
        raise ParameterError(f'unknown multiplier {multiplier!r}; use rademacher or gaussian')
    if not 0 < alpha < 1:
        raise ParameterError(f'alpha must lie in (0, 1), got {alpha}')

    event_times = [e for e in table.event_times() if e in estimates]
    draws = bootstrap_draws(table, B, multiplier, seed, n_jobs=n_jobs, event_times=event_times)
    v_boot = np.mean(draws ** 2, axis=0)

    zero = v_boot == 0
    if zero.all():
        logger.warning('All bootstrap draws are zero; band collapses to the point estimates')
        critical = 0.0
        sd = np.zeros_like(v_boot)
    else:
        if zero.any():
            raise DegenerateBandError(event_times[int(np.flatnonzero(zero)[0])])
        sd = np.sqrt(v_boot)
        stats = np.sort(np.max(np.abs(draws) / sd, axis=1))
        critical = float(stats[critical_index(B, alpha) - 1])

    bands = {
        e: (estimates[e] - critical * sd[k], estimates[e] + critical * sd[k])
        for k, e in enumerate(event_times)
    }

    # Compare against pointwise intervals built from the same influence values
    z = norm.ppf(1 - alpha / 2)
    pointwise_sd = np.array([
        math.sqrt(float(np.sum(table.phi[e].to_numpy() ** 2))) / table.n(e) for e in event_times
    ])
    covers = bool(np.all(critical * sd >= z * pointwise_sd - 1e-12))
    if not covers:
        logger.warning(f'Simultaneous band narrower than a pointwise CI on this run (c={critical:.4f}, z={z:.4f})')
    logger.info(f'Multiplier bootstrap done: B={B}, multiplier={multiplier}, seed={seed}, c={critical:.4f}')

    return BandResult(
        bands=MappingProxyType(bands),
        critical_value=critical,
        alpha=alpha,
        B=B,
        multiplier=multiplier,
        seed=seed,
        v_boot=MappingProxyType({e: float(v_boot[k]) for k, e in enumerate(event_times)}),
        covers_pointwise=covers,
    )

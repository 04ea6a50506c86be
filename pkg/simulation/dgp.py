"""
Synthetic staggered-adoption triple-difference panels.

Untreated outcomes are

    Y(0)[i, t] = alpha_i + delta(S_i, t) + eta(Q_i, t) + violation + noise

with alpha_i ~ N(0, 1). Without a violation the eligible-ineligible trend
gap eta(1, t) - eta(0, t) is the same in every cohort. Treated-eligible
units add catt(S_i, t - S_i) from t = S_i on.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType

import numpy as np
import pandas as pd

from panel.datasets import PanelDataset
from stacked_ddd.exceptions import ConfigError, UnknownCohortError

logger = logging.getLogger(__name__)

TREND_FAMILIES = ('linear', 'quadratic', 'step', 'zero')
CATT_KINDS = ('constant', 'linear', 'table')
NEVER_KEY = 'never'
SHARE_TOLERANCE = 1e-9


# ============================================
# PARAMETRIC TRENDS
# ============================================

def _family_value(family, coef, t):
    t = np.asarray(t, dtype=float)
    if family == 'zero':
        return np.zeros_like(t)
    if family == 'linear':
        return coef.get('a', 0.0) + coef.get('b', 0.0) * t
    if family == 'quadratic':
        return coef.get('a', 0.0) + coef.get('b', 0.0) * t + coef.get('c', 0.0) * t ** 2
    return coef.get('h', 0.0) * (t >= coef.get('t0', 0.0))


@dataclass(frozen=True)
class TrendSpec:
    """Named trend family with optional per-key coefficient overrides."""
    family: str = 'zero'
    coef: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    by: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        if self.family not in TREND_FAMILIES:
            raise ConfigError(f'unknown trend family {self.family!r}; use one of {", ".join(TREND_FAMILIES)}')
        object.__setattr__(self, 'coef', MappingProxyType({k: float(v) for k, v in dict(self.coef).items()}))
        object.__setattr__(self, 'by', MappingProxyType({
            str(key): MappingProxyType({k: float(v) for k, v in dict(values).items()})
            for key, values in dict(self.by).items()
        }))

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise ConfigError('a trend must be a JSON object with "family" and "coef"')
        return cls(family=data.get('family', 'zero'), coef=data.get('coef', {}), by=data.get('by', {}))

    def __call__(self, key, t):
        return _family_value(self.family, self.by.get(str(key), self.coef), t)

    def to_dict(self):
        return {
            'family': self.family,
            'coef': dict(self.coef),
            'by': {key: dict(values) for key, values in self.by.items()},
        }


@dataclass(frozen=True)
class CattSpec:
    kind: str = 'constant'
    c: float = 0.0
    a: float = 0.0
    b: float = 0.0
    by: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        if self.kind not in CATT_KINDS:
            raise ConfigError(f'unknown catt kind {self.kind!r}; use one of {", ".join(CATT_KINDS)}')
        object.__setattr__(self, 'by', MappingProxyType({
            int(g): MappingProxyType({int(e): float(v) for e, v in dict(values).items()})
            for g, values in dict(self.by).items()
        }))

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return cls()
        if isinstance(data, (int, float)):
            return cls('constant', c=float(data))
        if not isinstance(data, dict):
            raise ConfigError('catt must be a number or a JSON object')
        kind = data.get('kind', 'table' if 'by' in data else 'constant')
        return cls(
            kind=kind,
            c=float(data.get('c', 0.0)),
            a=float(data.get('a', 0.0)),
            b=float(data.get('b', 0.0)),
            by=data.get('by', {}),
        )

    def __call__(self, g, e):
        if self.kind == 'constant':
            return self.c
        if self.kind == 'linear':
            return self.a + self.b * e
        return self.by.get(int(g), {}).get(int(e), 0.0)

    def to_dict(self):
        if self.kind == 'constant':
            return {'kind': 'constant', 'c': self.c}
        if self.kind == 'linear':
            return {'kind': 'linear', 'a': self.a, 'b': self.b}
        return {'kind': 'table', 'by': {str(g): {str(e): v for e, v in row.items()} for g, row in self.by.items()}}


# ============================================
# CONFIG
# ============================================

@dataclass(frozen=True)
class DgpConfig:
    cohorts: tuple
    never_share: float = 0.0
    eligible_share: MappingProxyType = field(default_factory=lambda: MappingProxyType({'default': 0.5}))
    group_trend: TrendSpec = field(default_factory=TrendSpec)
    eligibility_trend: TrendSpec = field(default_factory=TrendSpec)
    violation: MappingProxyType | None = None
    catt: CattSpec = field(default_factory=CattSpec)
    noise_sd: float = 1.0
    n_units: int = 1000
    T: int = 6
    seed: int = 0

    def __post_init__(self):
        cohorts = tuple((int(g), float(share)) for g, share in self.cohorts)
        object.__setattr__(self, 'cohorts', cohorts)
        if not cohorts:
            raise ConfigError('at least one treated cohort is required')
        if len({g for g, _ in cohorts}) != len(cohorts):
            raise ConfigError('cohorts must be distinct')
        for g, share in cohorts:
            if not 2 <= g <= self.T:
                raise ConfigError(f'cohort {g} must lie in [2, T={self.T}] so that its baseline is observed')
            if share <= 0:
                raise ConfigError(f'share of cohort {g} must be positive, got {share}')
        if self.never_share < 0:
            raise ConfigError(f'never_share must be non-negative, got {self.never_share}')
        total = math.fsum(share for _, share in cohorts) + self.never_share
        if abs(total - 1.0) > SHARE_TOLERANCE:
            raise ConfigError(f'cohort shares and never_share must sum to 1, got {total!r}')

        shares = self.eligible_share
        if isinstance(shares, (int, float)):
            shares = {'default': shares}
        shares = {str(k): float(v) for k, v in dict(shares).items()}
        for key, p in shares.items():
            if not 0 < p < 1:
                raise ConfigError(f'eligible share for {key} must lie in (0, 1), got {p}')
        object.__setattr__(self, 'eligible_share', MappingProxyType(shares))

        if self.violation is not None:
            violation = dict(self.violation)
            try:
                violation = {'cohort': int(violation['cohort']), 'gamma': float(violation.get('gamma', 0.0))}
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError('violation needs an integer "cohort" and a numeric "gamma"') from exc
            if violation['cohort'] not in self.cohort_ids:
                raise ConfigError(f'violation cohort {violation["cohort"]} is not configured')
            object.__setattr__(self, 'violation', MappingProxyType(violation))

        if self.noise_sd < 0:
            raise ConfigError(f'noise_sd must be non-negative, got {self.noise_sd}')
        if self.n_units < 1:
            raise ConfigError(f'n_units must be positive, got {self.n_units}')

    @property
    def cohort_ids(self):
        return [g for g, _ in self.cohorts]

    def share(self, g):
        for cohort, share in self.cohorts:
            if cohort == g:
                return share
        raise UnknownCohortError(g)

    def p(self, key):
        """Eligible share of a cohort (int) or of the never-treated group."""
        shares = self.eligible_share
        return shares.get(str(key), shares.get('default', 0.5))

    def cell_sizes(self):
        """Units per (cohort key, eligible) by largest-remainder rounding of the shares."""
        keys = [g for g, _ in self.cohorts] + ([NEVER_KEY] if self.never_share > 0 else [])
        shares = [s for _, s in self.cohorts] + ([self.never_share] if self.never_share > 0 else [])
        sizes = _largest_remainder(self.n_units, shares)
        cells = {}
        for key, size in zip(keys, sizes):
            eligible = int(round(size * self.p(key)))
            cells[(key, True)] = eligible
            cells[(key, False)] = size - eligible
        return cells

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                cohorts=tuple(tuple(item) for item in data['cohorts']),
                never_share=float(data.get('never_share', 0.0)),
                eligible_share=data.get('eligible_share', {'default': 0.5}),
                group_trend=TrendSpec.from_dict(data.get('group_trend')),
                eligibility_trend=TrendSpec.from_dict(data.get('eligibility_trend')),
                violation=data.get('violation'),
                catt=CattSpec.from_dict(data.get('catt')),
                noise_sd=float(data.get('noise_sd', 1.0)),
                n_units=int(data.get('n_units', 1000)),
                T=int(data.get('T', 6)),
                seed=int(data.get('seed', 0)),
            )
        except KeyError as exc:
            raise ConfigError(f'DGP config lacks {exc.args[0]!r}') from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'invalid DGP config: {exc}') from exc

    def to_dict(self):
        return {
            'cohorts': [list(item) for item in self.cohorts],
            'never_share': self.never_share,
            'eligible_share': dict(self.eligible_share),
            'group_trend': self.group_trend.to_dict(),
            'eligibility_trend': self.eligibility_trend.to_dict(),
            'violation': None if self.violation is None else dict(self.violation),
            'catt': self.catt.to_dict(),
            'noise_sd': self.noise_sd,
            'n_units': self.n_units,
            'T': self.T,
            'seed': self.seed,
        }


def _largest_remainder(n, shares):
    raw = np.asarray(shares, dtype=float) * n
    sizes = np.floor(raw).astype(int)
    short = n - int(sizes.sum())
    order = np.argsort(-(raw - sizes), kind='stable')
    sizes[order[:short]] += 1
    return sizes.tolist()


# ============================================
# GENERATION
# ============================================

def true_catt(cfg: DgpConfig, g, e):
    """Configured effect of cohort g at event-time e; zero before treatment."""
    if int(g) not in cfg.cohort_ids:
        raise UnknownCohortError(g)
    if e < 0:
        return 0.0
    return float(cfg.catt(int(g), int(e)))


def weighted_truth(cfg: DgpConfig, e, weights):
    """sum_g v_g * catt(g, e) / sum_g v_g over the cohorts in weights."""
    total = math.fsum(weights.values())
    if total <= 0:
        raise ConfigError('truth weights must have a positive sum')
    return math.fsum(v * true_catt(cfg, g, e) for g, v in weights.items()) / total


def simulate_panel(cfg: DgpConfig, rng=None):
    """
    Draw one balanced panel over periods 1..T.

    Args:
        cfg: DgpConfig
        rng: numpy Generator; seeded from cfg.seed when omitted

    Returns:
        PanelDataset with unit ids u00000, u00001, ...
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed)) if rng is None else rng
    times = np.arange(1, cfg.T + 1)

    cohort_of, eligible_of = [], []
    for (key, eligible), size in cfg.cell_sizes().items():
        cohort_of += [None if key == NEVER_KEY else key] * size
        eligible_of += [eligible] * size
    n = len(cohort_of)
    unit_ids = [f'u{i:05d}' for i in range(n)]

    alpha = rng.standard_normal(n)
    noise = rng.standard_normal((n, cfg.T)) * cfg.noise_sd

    outcomes = np.empty((n, cfg.T))
    for i, (g, q) in enumerate(zip(cohort_of, eligible_of)):
        key = NEVER_KEY if g is None else g
        y = alpha[i] + cfg.group_trend(key, times) + cfg.eligibility_trend(int(q), times)
        if q and cfg.violation is not None and g == cfg.violation['cohort']:
            y = y + cfg.violation['gamma'] * times
        if q and g is not None:
            y = y + np.array([true_catt(cfg, g, t - g) if t >= g else 0.0 for t in times])
        outcomes[i] = y + noise[i]

    units = pd.DataFrame(
        {'cohort': pd.array(cohort_of, dtype='Int64'), 'eligible': eligible_of},
        index=pd.Index(unit_ids, name='unit'),
    )
    frame = pd.DataFrame(outcomes, index=units.index, columns=list(times))
    logger.debug(f'Simulated panel: n={n}, T={cfg.T}, seed={cfg.seed}')
    return PanelDataset(units, frame, time_range=(1, cfg.T), metadata={'source': 'simulation', 'seed': cfg.seed})

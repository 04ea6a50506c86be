"""
Small synthetic panels shared by the test suites.
"""
import numpy as np
import pandas as pd

from panel.datasets import PanelDataset

from .dgp import CattSpec, DgpConfig, simulate_panel


def panel_from_arrays(cohorts, eligible, outcomes, t_min=1):
    """PanelDataset from per-unit cohort (None = never), eligibility and an n x T outcome array."""
    outcomes = np.asarray(outcomes, dtype=float)
    index = pd.Index([f'u{i:03d}' for i in range(len(cohorts))], name='unit')
    units = pd.DataFrame(
        {'cohort': pd.array(list(cohorts), dtype='Int64'), 'eligible': [bool(q) for q in eligible]},
        index=index,
    )
    times = list(range(t_min, t_min + outcomes.shape[1]))
    return PanelDataset(units, pd.DataFrame(outcomes, index=index, columns=times), time_range=(times[0], times[-1]))


def toy_config(a=0.0, b=0.0, c=0.0, per_cohort=10, p=0.4, noise_sd=0.0, seed=7):
    """Two cohorts {2, 3}, T=4, equal shares, eligible share p, no never-treated units.

    CATT(2, 0) = a, CATT(3, 0) = b and CATT(2, 1) = c; every other effect is zero.
    """
    return DgpConfig(
        cohorts=((2, 0.5), (3, 0.5)),
        never_share=0.0,
        eligible_share={'default': p},
        catt=CattSpec('table', by={2: {0: a, 1: c}, 3: {0: b}}),
        noise_sd=noise_sd,
        n_units=2 * per_cohort,
        T=4,
        seed=seed,
    )


def toy_panel(a=0.0, b=0.0, c=0.0, **kwargs):
    return simulate_panel(toy_config(a, b, c, **kwargs))


def eight_unit_stack_panel(seed=11):
    """Cohort 3 and never-treated, two units per cell, T=4, random outcomes."""
    rng = np.random.default_rng(seed)
    cohorts = [3, 3, 3, 3, None, None, None, None]
    eligible = [1, 1, 0, 0, 1, 1, 0, 0]
    return panel_from_arrays(cohorts, eligible, rng.normal(size=(8, 4)))


def shared_control_panel(seed=5):
    """Cohorts 3 and 4 sharing one never-treated pool: 12 units, T=5."""
    rng = np.random.default_rng(seed)
    cohorts = [3] * 4 + [4] * 4 + [None] * 4
    eligible = [1, 1, 0, 0] * 3
    return panel_from_arrays(cohorts, eligible, rng.normal(size=(12, 5)))


def randomized_panel(rng, n_cohorts=None, T=None, never=True, min_cell=4, max_cell=40):
    """Random balanced staggered panel with uneven cell sizes."""
    T = int(rng.integers(4, 11)) if T is None else T
    n_cohorts = int(rng.integers(1, min(3, T - 2) + 1)) if n_cohorts is None else n_cohorts
    treated = sorted(rng.choice(np.arange(2, T + 1), size=n_cohorts, replace=False).tolist())
    groups = treated + ([None] if never else [])
    cohorts, eligible = [], []
    for g in groups:
        for q in (1, 0):
            size = int(rng.integers(min_cell, max_cell + 1))
            cohorts += [g] * size
            eligible += [q] * size
    outcomes = rng.normal(size=(len(cohorts), T)) + rng.normal(size=(len(cohorts), 1))
    return panel_from_arrays(cohorts, eligible, outcomes)

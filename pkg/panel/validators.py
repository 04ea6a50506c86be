"""
Overlap and labeling checks on a loaded panel.

validate_panel never raises on data problems; it returns a ValidationReport
whose ``violations`` list is empty for a clean panel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .datasets import NEVER, CohortLabel, PanelDataset

EMPTY_CELL = 'empty_cell'
COHORT_BEFORE_FIRST_PERIOD = 'cohort_before_first_period'


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    cohort: CohortLabel | None = None
    eligible: bool | None = None

    def to_dict(self):
        return {
            'kind': self.kind,
            'message': self.message,
            'cohort': None if self.cohort is None else self.cohort.to_json(),
            'eligible': None if self.eligible is None else int(self.eligible),
        }


@dataclass(frozen=True)
class ValidationReport:
    cell_counts: dict
    violations: tuple = field(default_factory=tuple)
    overlap_ok: bool = True
    n_units: int = 0
    time_range: tuple = (1, 1)
    balanced: bool = True
    unobserved_unit_periods: int = 0

    @property
    def ok(self):
        return self.overlap_ok and not self.violations

    def to_dict(self):
        return {
            'cell_counts': [
                {'cohort': cohort.to_json(), 'eligible': int(eligible), 'count': count}
                for (cohort, eligible), count in self.cell_counts.items()
            ],
            'violations': [v.to_dict() for v in self.violations],
            'overlap_ok': self.overlap_ok,
            'n_units': self.n_units,
            'time_range': list(self.time_range),
            'balanced': self.balanced,
            'unobserved_unit_periods': self.unobserved_unit_periods,
        }


def _needed_cohorts(ds, design):
    """Cohorts whose two eligibility cells the requested design relies on."""
    if design is None:
        return set(ds.cohort_labels())
    needed = set()
    for spec in design:
        if hasattr(spec, 'g'):
            needed.add(CohortLabel(spec.g))
            needed.add(CohortLabel.parse(spec.g_c))
        else:
            g, g_c = spec
            needed.add(CohortLabel.parse(g))
            needed.add(CohortLabel.parse(g_c))
    return needed


def validate_panel(ds: PanelDataset, design=None):
    """
    Enumerate (cohort, eligible) cells and report overlap problems.

    Args:
        ds: the panel to check
        design: optional iterable of stack specs (objects with ``g`` and
            ``g_c``) or (g, g_c) pairs. When given, overlap_ok only considers
            the cells those stacks need; otherwise every observed cohort's
            two cells are needed.

    Returns:
        ValidationReport
    """
    counts = dict(sorted(ds.cell_counts().items(), key=lambda item: (item[0][0].sort_key(), not item[0][1])))
    violations = []

    for (cohort, eligible), count in counts.items():
        if count == 0:
            violations.append(Violation(
                kind=EMPTY_CELL,
                message=f'empty cell ({cohort},{int(eligible)})',
                cohort=cohort,
                eligible=eligible,
            ))

    for g in ds.cohorts():
        if g <= ds.t_min:
            violations.append(Violation(
                kind=COHORT_BEFORE_FIRST_PERIOD,
                message=(
                    f'cohort before first differencing period: cohort {g} has no '
                    f'baseline period {g - 1} inside [{ds.t_min}, {ds.t_max}]'
                ),
                cohort=CohortLabel(g),
            ))

    needed = _needed_cohorts(ds, design)
    overlap_ok = all(
        count > 0
        for (cohort, _), count in counts.items()
        if cohort in needed
    )
    # A requested cohort with no units at all has two empty cells
    present = {cohort for cohort, _ in counts}
    if needed - present - {NEVER}:
        overlap_ok = False
    if NEVER in needed and NEVER not in present:
        overlap_ok = False

    observed = ds.outcomes.notna()
    return ValidationReport(
        cell_counts=counts,
        violations=tuple(violations),
        overlap_ok=overlap_ok,
        n_units=ds.n_units,
        time_range=ds.time_range,
        balanced=bool(observed.all().all()),
        unobserved_unit_periods=int((~observed).to_numpy().sum()),
    )

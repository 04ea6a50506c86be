"""
Domain errors shared by all stacked_ddd apps.

Management commands map DDDError to exit code 1; I/O failures map to 2.
"""


class DDDError(Exception):
    """Base class for every estimation-domain error."""


# ============================================
# PANEL INPUT
# ============================================

class PanelParseError(DDDError):
    """Malformed input row."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f'row {row}: {message}'
        super().__init__(message)


class DuplicateObservationError(DDDError):
    """Two rows share the same (unit, time)."""

    def __init__(self, unit, time, row=None):
        self.unit = unit
        self.time = time
        self.row = row
        where = f' (row {row})' if row is not None else ''
        super().__init__(f'duplicate observation for unit {unit}, time {time}{where}')


class SchemaError(DDDError):
    pass


class UnknownUnitError(DDDError, KeyError):
    def __init__(self, unit):
        self.unit = unit
        super().__init__(unit)

    def __str__(self):
        return f'unknown unit {self.unit!r}'


# ============================================
# STACK CONSTRUCTION
# ============================================

class EmptyCellError(DDDError):
    """A cell that must be populated has no usable units."""

    def __init__(self, cell, detail=''):
        self.cell = cell
        message = f'empty cell {cell}'
        if detail:
            message = f'{message}: {detail}'
        super().__init__(message)


class InfeasibleStackError(DDDError):
    def __init__(self, cohorts, detail=''):
        self.cohorts = list(cohorts)
        names = ', '.join(str(c) for c in self.cohorts)
        message = f'no admissible comparison cohort for cohort(s) {names}'
        if detail:
            message = f'{message}: {detail}'
        super().__init__(message)


class WindowError(DDDError):
    pass


# ============================================
# ESTIMATION AND INFERENCE
# ============================================

class WeightError(DDDError):
    pass


class MissingInputError(DDDError):
    pass


class FeasibilityError(DDDError):
    pass


class ParameterError(DDDError):
    pass


class DegenerateBandError(DDDError):
    def __init__(self, event_time):
        self.event_time = event_time
        super().__init__(
            f'bootstrap variance is zero at event-time {event_time} '
            f'while other event-times vary'
        )


class DegenerateTestError(DDDError):
    pass


# ============================================
# DIAGNOSTICS
# ============================================

class CollinearityError(DDDError):
    def __init__(self, event_times):
        self.event_times = list(event_times)
        super().__init__(
            'event-time indicators are linearly dependent after demeaning: '
            + ', '.join(str(e) for e in self.event_times)
        )


class ConvergenceError(DDDError):
    pass


class CoverageError(DDDError):
    def __init__(self, missing):
        self.missing = list(missing)
        preview = ', '.join(f'(g={g}, l={ell})' for g, ell in self.missing[:10])
        more = '' if len(self.missing) <= 10 else f' and {len(self.missing) - 10} more'
        super().__init__(f'missing CATT input with nonzero weight: {preview}{more}')


# ============================================
# CONFIGURATION
# ============================================

class ConfigError(DDDError):
    pass


# ============================================
# SIMULATION
# ============================================

class UnknownCohortError(DDDError, KeyError):
    def __init__(self, cohort):
        self.cohort = cohort
        super().__init__(cohort)

    def __str__(self):
        return f'cohort {self.cohort!r} is not configured'

"""Exception and warning types raised across the package.

Errors fall in four families that the command line maps to exit codes:
usage errors, data errors, convergence errors and everything else.
"""


class RetroPanelError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class UsageError(RetroPanelError):
    exit_code = 1


class DataError(RetroPanelError):
    exit_code = 2


class ConvergenceError(RetroPanelError):
    exit_code = 3


# -- panel construction ------------------------------------------------------


class MissingCell(DataError):
    """The panel is unbalanced: some (unit, period) cell has no row."""


class DuplicateCell(DataError):
    pass


class NonBinaryTreatment(DataError):
    pass


class NonAbsorbingTreatment(DataError):
    """A unit's treatment switches off again after switching on."""


class NeverTreatedUnit(DataError):
    pass


class WindowNotAllTreated(DataError):
    pass


class NoLaterTreated(DataError):
    pass


class NoAlwaysTreated(DataError):
    pass


class NoMissingCells(DataError):
    """There is nothing to impute."""


# -- solvers -----------------------------------------------------------------


class SvdFailure(ConvergenceError):
    pass


class NonConvergence(ConvergenceError):
    pass


class DegenerateWeights(DataError):
    pass


class CovariateMismatch(DataError):
    pass


class RankTooLow(DataError):
    pass


class BadPivot(UsageError):
    pass


class EmptyGrid(UsageError):
    pass


class FoldTooSmall(DataError):
    pass


class CollinearTreatment(DataError):
    """Treatment is fully explained by the unit and time effects."""


class DimensionMismatch(DataError):
    pass


class MissingCounterfactual(DataError):
    pass


class PipelineFailure(RetroPanelError):
    pass


class NoMissingCellsWarning(UserWarning):
    """Emitted when a completion problem has a fully observed mask."""

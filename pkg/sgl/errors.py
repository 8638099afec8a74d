"""errors.py

The exceptions raised by the lab. Every error derives from ``SglError`` and from
the builtin exception it specializes, so callers may catch either.

- domain errors for arguments outside the valid range of an operation
- numerical errors for non-finite states, scores and training losses
- density errors for grids that cannot carry a normalized density
- configuration errors for malformed experiment files and incomplete run
  directories

"""


class SglError(Exception):
    """Base class of all lab errors."""


class DomainError(SglError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularityError(DomainError):
    """The requested time is below ``t_min``, where the perturbation kernel
    degenerates."""


class NumericalBlowupError(SglError, ArithmeticError):
    """A state or score became non-finite.

    Parameters
    ------------
    message: str
        the description of the failure.
    x: numpy.ndarray
        the offending state, if known.
    t: float
        the time at which the blowup happened, if known.
    """

    def __init__(self, message: str, x=None, t: float = None):
        super().__init__(message)

        self.x = x
        self.t = t


class DivergenceError(NumericalBlowupError):
    """The training loss became non-finite.

    Parameters
    ------------
    message: str
        the description of the failure.
    trajectory: TrainTrajectory
        the records collected up to the last finite evaluation.
    """

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)

        self.trajectory = trajectory


class GridCoverageError(SglError, ValueError):
    """The evaluation grid misses a noticeable share of the probability mass."""


class DegenerateDensityError(SglError, ValueError):
    """A density cannot be normalized on the grid."""


class SupportError(SglError, ValueError):
    """Two densities do not live on the same grid, or ``q`` vanishes where ``p``
    carries mass."""


class UnsupportedModelError(SglError, TypeError):
    """The operation is not defined for the given score model."""


class ConfigError(SglError, ValueError):
    """The experiment configuration is malformed."""


class MissingColumnError(SglError, KeyError):
    """A table lacks a requested column.

    Parameters
    ------------
    column: str
        the missing column.
    filepath: str
        the table that was read.
    """

    def __init__(self, column: str, filepath: str):
        super().__init__(f"Column '{column}' not found in {filepath}")

        self.column = column
        self.filepath = filepath

    def __str__(self):
        return self.args[0]

    def __reduce__(self):
        return self.__class__, (self.column, self.filepath)


class ManifestError(SglError, FileNotFoundError):
    """A run directory has no manifest, or its manifest is inconsistent."""

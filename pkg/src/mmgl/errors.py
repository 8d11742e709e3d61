"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so new failure modes should subclass
one of the existing categories rather than raising bare ValueErrors.
"""


class MmglError(Exception):
    """Base class for all package errors."""


class DimensionError(MmglError):
    """Incompatible matrix/array shapes."""


class ParameterError(MmglError):
    """Invalid hyper-parameter or argument value (CLI exit code 2)."""


class ConfigError(ParameterError):
    """Malformed or inconsistent configuration file (CLI exit code 2)."""


class DataError(MmglError):
    """Invalid or unusable data (CLI exit code 3)."""


class SchemaError(DataError):
    """Modality schema does not match the data it describes."""


class ParseError(DataError):
    """Unreadable cell or record in an input file."""


class TrainingDiverged(MmglError):
    """A loss term became non-finite during training (CLI exit code 4).

    `term` names the first offending loss component.
    """

    def __init__(self, term, epoch):
        self.term = term
        self.epoch = epoch
        super().__init__(f"non-finite loss term '{term}' at epoch {epoch}")

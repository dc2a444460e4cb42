"""Exception hierarchy shared by every stage of the pipeline."""


class RSGANError(Exception):
    """Base class for all package errors."""


class DataError(RSGANError):
    """Input data could not be read or is unusable."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class EmptyDatasetError(DataError):
    pass


class ConfigError(RSGANError):
    pass


class NumericFault(RSGANError):
    """A loss or parameter became non-finite."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")


class DegenerateDistributionError(RSGANError):
    pass


class EmptySupportError(RSGANError):
    """Every entry of a Gumbel-Softmax input is masked."""


class FormatError(RSGANError):
    """A checkpoint or artifact file is corrupt or has the wrong version."""

"""Exception hierarchy shared by every svdonet module."""

from sklearn.exceptions import NotFittedError  # noqa: F401  (re-exported)


class SvdonetError(Exception):
    """Base class for all errors raised by svdonet."""


class InvalidData(SvdonetError, ValueError):
    """Input data is empty or contains non-finite entries."""


class InvalidShape(SvdonetError, ValueError):
    """Array dimensions do not conform."""


class InvalidRank(SvdonetError, ValueError):
    """Requested rank or mode count is out of range."""


class InvalidBounds(SvdonetError, ValueError):
    """Sampling bounds are malformed (lo >= hi, non-finite, ...)."""


class GridRequired(SvdonetError, ValueError):
    """Data must lie on a complete (y, scenario) grid for this operation."""


class NumericalFailure(SvdonetError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values.

    Parameters
    ----------
    message : str
    iterations : int, optional
        Iteration count reached by an iterative solver, when known.
    at : float, optional
        Independent-variable value (e.g. time) where the failure was detected.
    """

    def __init__(self, message, iterations=None, at=None):
        super().__init__(message)
        self.iterations = iterations
        self.at = at


class DivergedAtEpoch(NumericalFailure):
    """Training loss became non-finite."""

    def __init__(self, epoch, loss=float("nan")):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class ParseError(SvdonetError, ValueError):
    """A text file does not follow its documented format."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class MetaMissing(SvdonetError, FileNotFoundError):
    """The ``.meta.csv`` sibling of a snapshot CSV is absent."""

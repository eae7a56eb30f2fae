import numpy as np


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a Gram matrix is (numerically) rank deficient."""


class DegenerateUpdateError(SingularMatrixError):
    """Raised when a rank-one update would produce a singular matrix."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a downdate would leave the Gram matrix indefinite."""


class DivergenceError(RuntimeError):
    """Raised when gradient descent produces a non-finite loss."""


class DatasetParseError(ValueError):
    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}"
        if lineno is not None:
            where = f"{where}:{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class MissingMetadataError(ValueError):
    """Raised when a baseline needs pool metadata that was not supplied."""

"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
solver failures exit 3, I/O failures exit 4.
"""


class ConfigurationError(ValueError):
    """Invalid configuration value or violated parameter constraint."""


class SolverError(RuntimeError):
    """An iterative solve failed to converge.

    Attributes
    ----------
    history : list
        Per-iteration update norms recorded up to the failure, useful for
        postmortems and for deciding on damping / regularization changes.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class NumericsError(RuntimeError):
    """A linear solve or quadrature produced an unusable result."""

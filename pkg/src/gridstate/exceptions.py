class GridStateError(Exception):
    """Base class for all errors raised by gridstate."""


class CaseError(GridStateError, ValueError):
    """Invalid case, plan or partition document.

    ``location`` points at the offending record (e.g. ``"branches[3].to"``).
    """

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class UnobservableError(GridStateError):
    """The measurement set does not identify the state."""


class SolverError(GridStateError):
    """A numerical solver failed; ``diagnostics`` carries the last known state."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)

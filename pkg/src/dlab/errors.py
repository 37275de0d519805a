"""Exception hierarchy shared by every dlab module."""


class DlabError(Exception):
    pass


class InvalidArgumentError(DlabError, ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericalError(DlabError, ArithmeticError):
    """Raised when a computation produces non-finite or unusable numbers."""


class BlowUpError(NumericalError):
    """A simulated path left the finite range.

    Attributes
    ----------
    step : int
        First grid step at which a non-finite state appeared.
    paths : tuple of int
        Indices (within the simulated batch) of the offending paths.
    """

    def __init__(self, step, paths=()):
        self.step = int(step)
        self.paths = tuple(int(p) for p in paths)
        shown = ", ".join(str(p) for p in self.paths[:8])
        more = "..." if len(self.paths) > 8 else ""
        super().__init__(f"non-finite state at step {self.step} on paths [{shown}{more}]")


class UnsupportedOperationError(DlabError, NotImplementedError):
    """The inputs lack a capability (e.g. a derivative callback) the operation needs."""

"""Exception types shared across the package."""


class LQMFGError(Exception):
    pass


class InvalidModelError(LQMFGError, ValueError):
    """Model data failed validation; ``failures`` lists every violation."""

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("; ".join(self.failures))


class SolvabilityError(LQMFGError, ArithmeticError):
    """An ODE solution escaped the norm guard before reaching the end of the grid.

    Legitimate outcome for indefinite weights, not a crash.  ``escape_time`` is
    the first grid time at which the guard tripped.
    """

    def __init__(self, message, escape_time=None):
        super().__init__(message)
        self.escape_time = escape_time


class SimulationBlowUp(SolvabilityError):
    def __init__(self, message, replication, player, time):
        super().__init__(message, escape_time=time)
        self.replication = replication
        self.player = player
        self.time = time


class PolicyMismatchError(LQMFGError, ValueError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(LQMFGError, ValueError):
    """Configuration could not be loaded; ``line``/``column`` point into the file."""

    def __init__(self, message, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column

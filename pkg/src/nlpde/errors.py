"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class GridError(ToolkitError, ValueError):
    """Invalid grid construction or grid-incompatible arguments."""


class MeasureError(ToolkitError, ValueError):
    """Invalid jump-measure specification or quadrature."""


class ReachError(ToolkitError, ValueError):
    """A jump lands outside the stored lattice (interior plus halo)."""


class JetBoundError(ToolkitError, ValueError):
    """A one-sided second-order bound fails at some lattice offset.

    Carries the violating offset and the residual magnitude.
    """

    def __init__(self, message, witness=None, residual=None):
        super().__init__(message)
        self.witness = witness
        self.residual = residual


class VerificationFinding(ToolkitError, RuntimeError):
    """A checked property failed; this is a reported finding, not a bug.

    ``clause`` names the failed requirement, ``index`` the witness number
    when the failure occurs inside an indexed sequence.
    """

    def __init__(self, clause, index=None, detail=""):
        self.clause = clause
        self.index = index
        msg = f"verification clause failed: {clause}"
        if index is not None:
            msg += f" (witness m={index})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class SolverError(ToolkitError, RuntimeError):
    """Fixed-point iteration exhausted its budget.

    ``last_residual`` is the sup-norm residual of the final iterate.
    """

    def __init__(self, message, last_residual=None, iterations=None):
        super().__init__(message)
        self.last_residual = last_residual
        self.iterations = iterations


class ConfigError(ToolkitError, ValueError):
    """Experiment configuration failed to parse or validate."""

"""Exception hierarchy shared across the package.

Validation failures (bad configs, preconditions) map to CLI exit code 2,
numerical aborts (blow-up, negativity) to exit code 3.
"""


class ValidationError(ValueError):
    """A config, argument, or precondition was rejected before any numerics ran."""


class IntegrabilityError(ValidationError):
    """A requested norm or quadrature diverges (non-integrable singularity)."""


class NumericalAbort(RuntimeError):
    """A run was stopped mid-flight by a numerical failure.

    Carries whatever partial results were available at the time of the abort
    in ``partial`` so callers can still inspect or persist them.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class BlowUpError(NumericalAbort):
    """A particle position became non-finite (NaN/Inf)."""


class NegativityError(NumericalAbort):
    """A grid density cell went negative during time stepping."""

"""Error types shared across the package.

Contract violations map to CLI exit code 1 with a single-line
"DEFUSION-ERR:" prefix; anything else is a programming error.
"""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class CheckpointError(ContractViolation):
    """A checkpoint is missing, corrupt, or incompatible with the config."""


class DivergenceError(RuntimeError):
    """Training or inference produced non-finite values."""

"""Exception hierarchy shared by all modules.

ContractError (and subclasses) map to CLI exit code 1, NumericError and
RunError to exit code 2.
"""


class OrcaError(Exception):
    """Base for all orcakit errors."""

    exit_code = 1


class ContractError(OrcaError):
    """A precondition or API contract was violated by the caller."""

    exit_code = 1


class ShapeError(ContractError):
    """Array shapes are inconsistent with the operation."""


class FormatError(ContractError):
    """An on-disk artifact (bundle, config, checkpoint) is malformed."""


class NumericError(OrcaError):
    """A numeric computation produced NaN/Inf or failed to converge fatally."""

    exit_code = 2


class RunError(NumericError):
    """A training run aborted (diverged loss, NaN distance)."""

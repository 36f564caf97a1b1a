"""Exception taxonomy shared across the pipeline.

Exit codes at the CLI boundary: 1 = usage/configuration, 2 = data or
integrity problem, 3 = infeasible request (budgets/disjointness that
cannot be satisfied).
"""


class PipelineError(Exception):
    exit_code = 2


class ConfigError(PipelineError):
    """Bad configuration value or flag combination."""

    exit_code = 1


class DataError(PipelineError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class ParseError(DataError):
    """Unreadable corpus record."""


class RangeError(DataError):
    """Token id outside the declared vocabulary."""


class IntegrityError(DataError):
    """Streams or plans that do not line up with their source data."""


class UndefinedScoreError(DataError):
    """PMI requested for an n-gram with a zero-count segment."""


class InfeasibleError(PipelineError):
    """A sampling budget or disjointness requirement that cannot be met."""

    exit_code = 3

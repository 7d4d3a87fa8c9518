"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KandinskyError(Exception):
    exit_code = 4
    kind = "internal"


class FormatError(KandinskyError, ValueError):
    """Unreadable or malformed input file."""

    exit_code = 1
    kind = "parse"


class ValidationError(KandinskyError, ValueError):
    """Input violates a documented precondition or invariant."""

    exit_code = 2
    kind = "validation"

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (example {index})"
        super().__init__(message)
        self.index = index


class MissingTagsError(ValidationError):
    """An operation needs latent-group tags that the dataset does not carry."""


class SolverError(KandinskyError, RuntimeError):
    exit_code = 3
    kind = "solver"


class UnboundedError(SolverError):
    pass


class DegenerateInterpolationError(SolverError):
    """More than d rows interpolated although the scores were jittered."""

    def __init__(self, rows, d):
        self.rows = list(rows)
        super().__init__(
            f"{len(self.rows)} interpolated rows exceed d={d} under jittered scores: "
            f"rows {self.rows[:20]}"
        )


class InvariantError(KandinskyError, AssertionError):
    exit_code = 4
    kind = "invariant"

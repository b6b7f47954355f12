"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigurationError -> 2,
NumericError (and subclasses) -> 3.
"""


class ConfigurationError(ValueError):
    """Invalid configuration: bad dimensions, bad flags, malformed config."""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf or an otherwise unusable value.

    ``context`` collects whatever the raiser knew (and outer layers learn)
    about where the failure happened, e.g. the driving iteration index.
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)

    def __str__(self):
        base = super().__str__()
        if self.context:
            detail = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            return f"{base} [{detail}]"
        return base


class PreconditionerNotSpdError(NumericError):
    """The preconditioner violated its symmetric-positive-definite contract."""


class CorpusFormatError(Exception):
    """Corpus file is not parseable; ``offset`` is the failing byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class InsufficientSampleError(ValueError):
    """An estimator was handed fewer samples than it mathematically needs."""

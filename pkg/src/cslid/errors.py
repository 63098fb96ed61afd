"""Exception hierarchy shared across the toolkit.

Every error raised on purpose derives from :class:`CslidError`; the CLI maps
:class:`ConfigError` (and subclasses) to exit code 2 and everything else to 1.
"""


class CslidError(Exception):
    category = "runtime"


class ConfigError(CslidError, ValueError):
    category = "config"


class DecodeError(CslidError, ValueError):
    category = "decode"


class UnsupportedFormatError(DecodeError):
    category = "unsupported-format"


class EmptyInputError(CslidError, ValueError):
    category = "empty-input"


class ManifestError(CslidError, ValueError):
    category = "manifest"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(CslidError):
    category = "integrity"


class ScheduleError(ConfigError):
    category = "schedule"


class ShapeError(CslidError, ValueError):
    category = "shape"


class InfeasibleTargetError(CslidError, ValueError):
    category = "infeasible-target"


class OptimizerStateError(CslidError, RuntimeError):
    category = "optimizer-state"


class InputTooShortError(CslidError, ValueError):
    category = "input-too-short"


class ConfigMismatchError(IntegrityError):
    category = "config-mismatch"


class UndefinedClassError(CslidError, ValueError):
    category = "undefined-class"

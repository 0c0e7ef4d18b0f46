"""Exception types shared across the package."""


class SurvfuseError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SurvfuseError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ValidationError(SurvfuseError, ValueError):
    """An input value violates a documented precondition."""


class ConfigError(SurvfuseError, ValueError):
    """A configuration file, key, or override is malformed."""


class PreprocessError(SurvfuseError, RuntimeError):
    """Preprocessing failed; carries the subject id when known."""

    def __init__(self, message, subject_id=None):
        super().__init__(message)
        self.subject_id = subject_id

    def __str__(self):
        base = super().__str__()
        if self.subject_id is not None:
            return f"[subject {self.subject_id}] {base}"
        return base


class FormatError(SurvfuseError, ValueError):
    """A binary file does not match its declared on-disk format."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ManifestError(SurvfuseError, ValueError):
    """Manifest validation failed; lists every invalid row, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__(
            "manifest validation failed:\n" + "\n".join(f"  - {p}" for p in self.problems)
        )


class TrainingDiverged(SurvfuseError, RuntimeError):
    """A training loss became non-finite."""

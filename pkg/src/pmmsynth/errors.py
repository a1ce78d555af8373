"""Exception hierarchy shared across the package.

``exit_code`` is what the CLI returns when the error escapes a subcommand.
"""

from __future__ import annotations


class PMMSynthError(Exception):
    exit_code = 3


class ValidationError(PMMSynthError, ValueError):
    exit_code = 2


class VocabularyError(ValidationError):
    """Unknown modality name or index."""


class ConfigError(ValidationError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class SampleValidationError(ValidationError):
    def __init__(self, sample_id: str, problems: list[str]):
        self.sample_id = sample_id
        self.problems = list(problems)
        super().__init__(f"sample {sample_id}: " + "; ".join(self.problems))


class ShapeError(ValidationError):
    pass


class InvalidTaskError(ValidationError):
    """Empty source set, overlapping source/target, or nothing to evaluate."""


class ConstraintViolation(ValidationError):
    """A synthesis condition marks an unavailable modality as a source."""


class UntrainableSampleError(ValidationError):
    """Fewer than two available modalities: no source/target split exists."""


class ConditioningError(ValidationError):
    """Dataset identifier outside the registry range."""


class ScheduleError(ValidationError):
    pass


class ResumeError(PMMSynthError):
    """Checkpoint does not belong to the current registry/corpus."""

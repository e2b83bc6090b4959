"""Exception hierarchy shared across the pipeline.

The CLI maps these to stage-tagged exit codes: validation errors -> 2,
missing attention -> 3, VLM failures -> 4, load/IO failures -> 5.
"""


class MaskPriorError(Exception):
    """Base class for all pipeline errors."""


class SceneLoadError(MaskPriorError):
    """A required file is missing or unreadable."""


class SceneValidationError(MaskPriorError):
    """Loaded data violates a declared invariant or manifest contract."""


class AttentionUnavailableError(MaskPriorError):
    """No attention dump covers the requested (view, view, tokens) slice."""


class VlmError(MaskPriorError):
    """VLM endpoint failure after retries; carries the last HTTP status."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class VlmParseError(MaskPriorError):
    """No verdict lines could be parsed from a VLM response."""

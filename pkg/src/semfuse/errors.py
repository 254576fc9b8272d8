"""Exception types shared across the package.

Every error raised on a user-facing path derives from :class:`SemfuseError`
so the CLI can report it as a single machine-parsable line.
"""


class SemfuseError(Exception):
    """Base class for all semfuse errors."""


class SceneFormatError(SemfuseError):
    """A scene directory or one of its files is malformed."""


class MissingFileError(SceneFormatError):
    """A required scene file is absent or truncated."""


class ShapeMismatchError(SceneFormatError):
    """A buffer does not match the dimensions declared in scene metadata."""


class ConfigError(SemfuseError):
    """Invalid CLI flag combination or config file content."""


class CacheRequiredError(SemfuseError):
    """An operation needs a voxel observation cache that was not built."""


class DegenerateInputError(SemfuseError):
    """Input lacks the variation an operation needs (e.g. single-class labels)."""

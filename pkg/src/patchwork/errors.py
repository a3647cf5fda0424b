"""Exception hierarchy shared by all patchwork modules."""


class PatchworkError(Exception):
    """Base class for every error raised by this package."""


class SingularAffine(PatchworkError, ValueError):
    pass


class UnsupportedDatatype(PatchworkError, ValueError):
    pass


class MalformedHeader(PatchworkError, ValueError):
    pass


class IoError(PatchworkError, OSError):
    pass


class DegenerateImage(PatchworkError, ValueError):
    pass


class InvalidFactor(PatchworkError, ValueError):
    pass


class InvalidScheme(PatchworkError, ValueError):
    pass


class ChildTooLarge(PatchworkError, ValueError):
    pass


class ShapeMismatch(PatchworkError, ValueError):
    pass


class AllMasked(PatchworkError, ValueError):
    """Every target voxel is marked dontcare, so no loss can be formed."""


class NoLabels(PatchworkError, ValueError):
    pass


class DivergedTraining(PatchworkError, RuntimeError):
    pass


class SchemeMismatch(PatchworkError, ValueError):
    pass


class BadThresholdCount(PatchworkError, ValueError):
    pass


class ConfigError(PatchworkError, ValueError):
    pass


class InvariantError(PatchworkError, AssertionError):
    """An internal consistency check failed (CLI exit code 2)."""

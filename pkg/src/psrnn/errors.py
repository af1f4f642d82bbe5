"""Exception types shared across the package.

Anything caused by a malformed request (bad shapes, bad config, bad CLI
usage) derives from ValueError; anything detected mid-run (corrupt files,
diverged training) derives from RuntimeError. The CLI maps the first group
to exit code 1 and the second to exit code 2.
"""


class ShapeError(ValueError):
    """Tensor shapes or extents are invalid or inconsistent."""


class PartitionError(ValueError):
    """Residue dimensions are not divisible by the transform partition."""


class UsageError(ValueError):
    """An operation was invoked with arguments outside its contract."""


class ConfigError(ValueError):
    """Configuration values are invalid or inconsistent with a model."""


class FormatError(ValueError):
    """An input file could not be parsed."""


class SizeError(ValueError):
    """An image is too small for the requested operation."""


class ModeError(ValueError):
    """An intra prediction mode index is out of range."""


class IntegrityError(RuntimeError):
    """A model file is truncated or fails its checksum."""


class VersionError(RuntimeError):
    """A model file was written by an unsupported format version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration

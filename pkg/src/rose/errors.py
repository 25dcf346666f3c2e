"""Exception types shared across the package."""


class RoseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RoseError):
    """Operands have incompatible shapes; message names both."""


class DomainError(RoseError):
    """An input lies outside an operation's documented domain."""


class DatasetError(RoseError):
    """A scene directory is missing files or internally inconsistent."""


class CheckpointError(RoseError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class TrainingDiverged(RoseError):
    """Training produced a non-finite loss; message carries iteration and lr."""


class EvalError(RoseError):
    """Evaluation was asked to run without the data it needs."""

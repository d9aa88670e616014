"""Exception hierarchy shared by all scrc modules."""


class ScrcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ScrcError):
    """Operands have incompatible dimensions."""


class InputError(ScrcError):
    """Invalid argument or dataset content (bad box, empty query, missing key)."""


class FormatError(ScrcError):
    """A file does not conform to its on-disk format."""


class ConfigError(ScrcError):
    """Inconsistent or out-of-range configuration."""


class TrainingError(ScrcError):
    """Optimization cannot proceed (e.g. non-finite gradients)."""


class ContractError(ScrcError):
    """A cached intermediate does not match the computation it is used in."""

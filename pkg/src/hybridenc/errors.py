"""Exception hierarchy. CLI exit codes are attached to the classes."""


class HybridEncError(Exception):
    exit_code = 4


class ShapeError(HybridEncError, ValueError):
    exit_code = 2


class ConfigError(HybridEncError, ValueError):
    exit_code = 2


class CapacityError(ConfigError):
    """Sequence longer than the model's maximum length."""


class PlanError(ConfigError):
    """Interleave plan references are missing or duplicated."""


class DataError(HybridEncError, ValueError):
    exit_code = 3


class PreconditionError(DataError):
    """A required earlier artifact (e.g. a prior stage checkpoint) is missing."""


class InvariantError(HybridEncError, RuntimeError):
    exit_code = 4

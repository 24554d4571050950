"""Exception taxonomy shared across the package."""


class MagesimError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MagesimError):
    """Invalid configuration value or malformed config file."""


class ShapeError(MagesimError):
    """Tensor or slab dimensions disagree with the declared layout."""


class PlanError(MagesimError):
    """A selection plan references cache entries that do not exist."""


class SelectionError(MagesimError):
    """Selection statistics are degenerate (e.g. empty candidate set)."""


class DomainError(MagesimError):
    """Scalar argument outside the mathematical domain of an operation."""


class AllocationError(MagesimError):
    """Budget allocation received unusable layer scores."""


class StateError(MagesimError):
    """Operation applied to a block in the wrong decoding state."""


class MetricError(MagesimError):
    """Metric requested on inputs that cannot support it."""


class CostModelError(MagesimError):
    """Latency model invoked outside its stated domain."""


class DataError(MagesimError):
    """Training-data construction received unusable input."""


class TraceParseError(MagesimError):
    """A trace file is corrupt; the message carries the byte offset."""

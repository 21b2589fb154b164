"""Exception types shared across the package."""


class VisPromptError(Exception):
    """Base class for all package errors."""


class DimensionError(VisPromptError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(VisPromptError, ValueError):
    """Input is structurally valid but numerically degenerate (zero row, empty evidence)."""


class ConfigError(VisPromptError, ValueError):
    """A configuration value violates its precondition."""


class PartitionError(VisPromptError, ValueError):
    """Reliable/unreliable subsets do not form a disjoint cover of the batch."""


class StateError(VisPromptError, RuntimeError):
    """Operation called in an invalid order (e.g. backward without a forward cache)."""


class OracleError(VisPromptError, RuntimeError):
    """A numerical oracle (finite differences) hit a non-finite evaluation."""


class GenerationError(VisPromptError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class VpftFormatError(VisPromptError, ValueError):
    """A VPFT feature file is malformed; the message carries the failing byte offset."""

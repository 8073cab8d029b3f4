"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's contract."""


class DomainError(ValueError):
    """Operand values outside an operation's mathematical domain."""


class ConfigError(ValueError):
    """Invalid run configuration value or combination."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or inconsistent with the model."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward)."""

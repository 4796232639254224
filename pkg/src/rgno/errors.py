"""Exception types shared across the package."""


class GeometryError(ValueError):
    """Degenerate or invalid geometric input (too few points, collinear sets, ...)."""


class GraphBuildError(RuntimeError):
    """Graph construction produced an invalid connectivity (e.g. uncovered nodes)."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(ValueError):
    """Malformed binary file; message includes the byte offset where parsing failed."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or similar), with epoch/batch context."""

"""Exception types shared across the package."""

from __future__ import annotations


class DivergenceError(RuntimeError):
    """A training or inference loop produced a non-finite quantity."""

    def __init__(self, message: str, iteration: int | None = None, breakdown: dict | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        if breakdown:
            message = f"{message}; components: {breakdown}"
        super().__init__(message)
        self.iteration = iteration
        self.breakdown = breakdown or {}


class StaleCacheError(RuntimeError):
    """A backward pass was attempted with a cache from before a parameter update."""


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` points at the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field

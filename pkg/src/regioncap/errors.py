"""Error types shared across modules."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent with an input."""


class ShapeError(ValueError):
    """Two arrays that must agree in shape do not."""

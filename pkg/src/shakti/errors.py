"""Exception hierarchy shared across the engine.

The CLI maps these to exit codes: ``UsageError``/``ConfigError`` -> 1,
``DataError`` subclasses -> 2, anything else -> 3.
"""


class ShaktiError(Exception):
    pass


class UsageError(ShaktiError):
    pass


class ConfigError(ShaktiError, ValueError):
    pass


class DataError(ShaktiError):
    pass


class ShapeError(DataError, ValueError):
    pass


class QuantizationError(DataError, ValueError):
    pass


class FormatError(DataError):
    """Malformed or inconsistent model file."""


class LayoutError(DataError):
    """Weight map does not match the model's tensor layout contract."""


class CacheError(ShaktiError, RuntimeError):
    pass


class TensorNotFound(DataError, KeyError):
    def __init__(self, name: str, near: list[str]):
        self.name = name
        self.near = near
        hint = f"; did you mean {', '.join(near)}?" if near else ""
        super().__init__(f"no tensor named {name!r}{hint}")

    def __str__(self) -> str:
        return self.args[0]

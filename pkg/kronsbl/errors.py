class KronsblError(Exception):
    """Base class for every error raised by kronsbl."""


class ShapeError(KronsblError, ValueError):
    pass


class ParameterError(KronsblError, ValueError):
    pass


class ConditioningError(KronsblError, ArithmeticError):
    """A Gram block could not be factorized as Hermitian positive definite."""

    def __init__(self, msg: str, block: int, smallest_pivot: float):
        super().__init__(msg)
        self.block = block
        self.smallest_pivot = smallest_pivot


class ConfigError(KronsblError, ValueError):
    """Experiment config failed validation. `key` is the dotted config key, if any."""

    def __init__(self, msg: str, key: str = ""):
        super().__init__(msg)
        self.key = key

"""Exception hierarchy shared by every module."""


class MixerFlowError(Exception):
    pass


class ContractError(MixerFlowError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    pass


class DomainError(MixerFlowError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class NumericError(MixerFlowError, ArithmeticError):
    """A NaN/Inf appeared, or a scale overflowed. ``where`` names the layer."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)

    def located(self, where: str) -> "NumericError":
        inner = f"{where}.{self.where}" if self.where else where
        msg = str(self).split(": ", 1)[1] if self.where else str(self)
        return NumericError(msg, inner)


class ConditioningError(NumericError):
    """A triangular diagonal or ActNorm scale came too close to zero."""


class GraphError(MixerFlowError, RuntimeError):
    pass


class InitializationError(MixerFlowError, RuntimeError):
    """A data-dependent layer was used before its first-batch initialisation."""


class GeometryError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class FormatError(MixerFlowError, ValueError):
    """Malformed dataset or image file. ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        self.offset = offset
        self.path = path
        where = []
        if path:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)

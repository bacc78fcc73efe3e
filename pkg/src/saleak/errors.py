"""Exception hierarchy shared by every module."""


class SaleakError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(SaleakError, ValueError):
    pass


class ConfigError(SaleakError, ValueError):
    pass


class ArchitectureError(SaleakError):
    """The model has no layer a fishing modification can be applied to."""


class ConditioningError(SaleakError):
    """The disaggregation coefficient matrix is (numerically) rank deficient."""

    def __init__(self, message: str, rcond: float = 0.0):
        super().__init__(message)
        self.rcond = rcond


class DataAgnosticError(SaleakError):
    """A fishing model produced input-dependent embeddings or logits."""


class ProtocolError(SaleakError):
    """Secure-aggregation protocol violation (missing client, mixed modes, ...)."""


class RangeError(SaleakError, ValueError):
    """A gradient value falls outside the fixed-point encoding range."""


class FormatError(SaleakError, ValueError):
    """Malformed binary input (IDX files, wire payloads)."""


class ContractError(SaleakError):
    """Arguments violate an inter-function contract (e.g. trace from another model)."""

"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class CapabilityError(TypeError):
    """Raised when a model lacks a capability an operation needs (e.g. gradients)."""


class TransportError(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    """Remote classifier answered with a body that does not follow the wire format."""


class TrainingFailure(RuntimeError):
    pass


class DatasetError(ValueError):
    pass

"""Exception hierarchy shared by every ILNet component."""


class ILNetError(Exception):
    """Base class for all toolkit errors"""


class DimensionError(ILNetError, ValueError):
    """Array shapes do not fit the operation"""


class ArgumentError(ILNetError, ValueError):
    """An argument is outside its valid range"""


class TapeStateError(ILNetError, RuntimeError):
    """A tape is used in a state that does not allow the request"""


class ConfigurationError(ILNetError):
    """Run configuration is invalid or inconsistent"""


class DataError(ILNetError):
    """Input data violates a documented contract"""


class ScenarioParseError(DataError):
    """A scenario or manifest file could not be parsed"""

    def __init__(self, path: str, detail: str):
        self.path = path
        self.detail = detail
        super().__init__(f"{path}: {detail}")


class VersionError(DataError):
    """File format or checkpoint version does not match"""


class NumericFailure(ILNetError):
    """A non-finite value appeared during training"""

    def __init__(self, tensor_name: str, context: str = ""):
        self.tensor_name = tensor_name
        message = f"non-finite values in '{tensor_name}'"
        if context:
            message = f"{message} ({context})"
        super().__init__(message)

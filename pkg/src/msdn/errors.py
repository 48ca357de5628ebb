"""Exception taxonomy shared by every layer of the package."""


class MSDNError(Exception):
    pass


class DimensionError(MSDNError, ValueError):
    """Shapes or axes are incompatible with the requested op."""


class ContractError(MSDNError, ValueError):
    """An op was called outside its documented preconditions."""


class ConfigError(MSDNError, ValueError):
    """Invalid hyperparameters, model kind or configuration file."""


class DataError(MSDNError, ValueError):
    """Input data violates an invariant (label range, empty component, ...)."""


class FormatError(MSDNError, ValueError):
    """A serialized tensor or checkpoint is corrupt or truncated."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(MSDNError, KeyError):
    """A checkpoint names a parameter the model does not have (or vice versa)."""

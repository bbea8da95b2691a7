"""Exception types shared across the package."""


class FgnnError(Exception):
    """Base class for all package errors."""


class ConfigError(FgnnError):
    """Invalid or unknown configuration value."""


class MalformedInputError(FgnnError):
    """Input file is readable but its contents violate the declared format."""


class EmptyDatasetError(FgnnError):
    """Filtering or parsing left no usable data."""


class VocabError(FgnnError):
    """Item index or raw id outside the known vocabulary."""


class MissingNodeError(FgnnError):
    """Graph operation referenced a node that is not in the graph."""


class ShapeError(FgnnError):
    """Tensor operands have incompatible shapes."""


class ContractError(FgnnError):
    """A call violated an operation's precondition."""


class NumericError(FgnnError):
    """Non-finite value where a finite one is required."""

"""Exception hierarchy.

Every error carries a ``category`` string that the CLI prints verbatim and an
``exit_code`` (2 = configuration, 3 = data, 4 = internal).
"""


class KcdError(Exception):
    category = "InternalError"
    exit_code = 4


class ConfigError(KcdError, ValueError):
    category = "ConfigError"
    exit_code = 2


class DataError(KcdError, ValueError):
    category = "DataError"
    exit_code = 3


class FormatError(DataError):
    category = "FormatError"


class UnsupportedLayout(DataError):
    category = "UnsupportedLayout"


class InvalidValue(DataError):
    category = "InvalidValue"


class ShapeMismatch(DataError):
    category = "ShapeMismatch"


class InsufficientSamples(DataError):
    category = "InsufficientSamples"


class PartitionError(DataError):
    category = "PartitionError"


class EmptyClass(DataError):
    category = "EmptyClass"


class SingularSystem(DataError):
    category = "SingularSystem"


class DivergenceError(DataError):
    category = "DivergenceError"


class IoError(DataError, OSError):
    category = "IoError"

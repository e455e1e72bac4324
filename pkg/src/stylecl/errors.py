"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class StyleCLError(Exception):
    exit_code = 1


class ConfigError(StyleCLError, ValueError):
    exit_code = 2


class FormatError(StyleCLError, ValueError):
    exit_code = 3


class InvariantError(StyleCLError, ValueError):
    exit_code = 4


class DimensionError(InvariantError):
    pass


class ShapeError(InvariantError):
    pass


class ProtocolError(InvariantError):
    pass


class LabelError(InvariantError):
    pass


class EmptyDatasetError(InvariantError):
    pass

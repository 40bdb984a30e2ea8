"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI uses when it escapes.
"""


class OpcError(Exception):
    exit_code = 1


class LayoutParseError(OpcError):
    exit_code = 2


class GeometryError(OpcError):
    exit_code = 3


class SelfIntersectionError(GeometryError):
    pass


class ConfigError(OpcError):
    exit_code = 4


class EncodingError(OpcError):
    exit_code = 5


class NumericError(OpcError):
    exit_code = 6


class GenerationError(OpcError):
    exit_code = 7

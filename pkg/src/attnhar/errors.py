"""Exception hierarchy. Each family maps onto one CLI exit code."""


class AttnHarError(Exception):
    exit_code = 1


class ConfigError(AttnHarError, ValueError):
    exit_code = 2


class DimensionError(AttnHarError, ValueError):
    exit_code = 2


class WindowTooShortError(DimensionError):
    pass


class DataError(AttnHarError, ValueError):
    exit_code = 2


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class UnsupportedVariantError(ConfigError):
    pass


class ContractError(AttnHarError, RuntimeError):
    """A cache or state object was used outside the call it belongs to."""

    exit_code = 2


class NumericError(AttnHarError, ArithmeticError):
    exit_code = 3


class CheckpointError(AttnHarError, OSError):
    exit_code = 4

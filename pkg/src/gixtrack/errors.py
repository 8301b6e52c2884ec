"""Error types shared across the package.

``ConfigError`` marks problems with user-supplied configuration (bad keys,
unparseable values, inconsistent settings); ``DataError`` marks problems with
data files (wrong magic numbers, malformed records, values out of range).
The command line maps them to distinct exit codes.
"""


class ConfigError(Exception):
    """A configuration file or option is invalid."""


class DataError(Exception):
    """A data file is malformed or internally inconsistent."""

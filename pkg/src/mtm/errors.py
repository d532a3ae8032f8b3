"""Exception taxonomy shared by the library and the CLI exit codes."""


class MtmError(Exception):
    exit_code = 1


class ConfigError(MtmError):
    exit_code = 2


class DataError(MtmError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(DataError):
    pass


class NumericError(MtmError):
    exit_code = 4

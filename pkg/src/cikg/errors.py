"""Exception hierarchy. Each family maps to one CLI exit code."""


class CIKGError(Exception):
    exit_code = 1


class ConfigError(CIKGError):
    exit_code = 2


class DataError(CIKGError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, lineno, line, reason="malformed record"):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path} line {lineno}: {reason}: {line!r}")


class EmptyDatasetError(DataError):
    pass


class IngestionError(DataError):
    pass


class MergeError(DataError):
    pass


class ContractError(CIKGError):
    """Caller passed arguments violating an operation's precondition."""


class NumericalError(CIKGError):
    exit_code = 4


class LLMTransportError(CIKGError):
    exit_code = 5

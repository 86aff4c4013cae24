"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PatlexError(Exception):
    exit_code = 1


class ValidationError(PatlexError, ValueError):
    exit_code = 2


class FormatError(ValidationError):
    """Malformed feature, model, or manifest file."""


class DecodeError(ValidationError):
    """Utterance too short to fit a single pattern."""


class QueryError(ValidationError):
    pass


class CorpusIOError(PatlexError, OSError):
    exit_code = 3

    def __init__(self, path, reason="no such file"):
        self.path = str(path)
        super().__init__(f"{reason}: {self.path}")


class NumericError(PatlexError, ArithmeticError):
    exit_code = 4

class MergeClError(Exception):
    """Base class for every error raised by mergecl."""

    exit_code = 1


class InputError(MergeClError, ValueError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class AlignmentError(MergeClError, ValueError):
    pass


class UsageError(MergeClError, RuntimeError):
    exit_code = 2


class NumericalError(MergeClError, ArithmeticError):
    pass


class ConfigError(MergeClError):
    exit_code = 2


class FormatError(MergeClError):
    pass


class CorruptionError(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset

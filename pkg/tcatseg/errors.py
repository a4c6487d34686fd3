from __future__ import annotations


class TcatError(Exception):
    """Base class for every error raised by tcatseg."""


class DimensionError(TcatError, ValueError):
    pass


class SizeError(TcatError, ValueError):
    pass


class ContractError(TcatError, RuntimeError):
    pass


class ValidationError(TcatError, ValueError):
    pass


class CloudParseError(ValidationError):
    def __init__(self, message: str, line_no: int) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FormatError(ValidationError):
    pass


class GradCheckError(TcatError, RuntimeError):
    def __init__(self, message: str, param: str) -> None:
        super().__init__(f"{param}: {message}")
        self.param = param


class NumericalAbort(TcatError, RuntimeError):
    pass

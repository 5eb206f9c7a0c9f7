"""Exception hierarchy.

Every error raised by the library derives from :class:`SclipError`; most also
derive from ``ValueError`` so callers that only care about bad input can catch
that instead.
"""


class SclipError(Exception):
    """Base class for all library errors."""


class ZeroRow(SclipError, ValueError):
    def __init__(self, index: int):
        super().__init__(f"row {index} has (near) zero norm")
        self.index = index


class NonFinite(SclipError, ValueError):
    pass


class DimMismatch(SclipError, ValueError):
    pass


class LengthMismatch(SclipError, ValueError):
    pass


class BadTemperature(SclipError, ValueError):
    pass


class BadLambda(SclipError, ValueError):
    pass


class ZeroKernelRow(SclipError, ArithmeticError):
    def __init__(self, row: int):
        super().__init__(
            f"kernel row {row} underflowed to all zeros; increase lambda"
        )
        self.row = row


class DegenerateRow(SclipError, ValueError):
    def __init__(self, index: int):
        super().__init__(f"plan row {index} sums to ~0")
        self.index = index


class BatchTooSmall(SclipError, ValueError):
    pass


class NonFiniteLoss(SclipError, ArithmeticError):
    pass


class SpecInvalid(SclipError, ValueError):
    pass


class KTooLarge(SclipError, ValueError):
    pass


class ConfigInvalid(SclipError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ParseError(SclipError, ValueError):
    pass


class BadMagic(SclipError, ValueError):
    pass

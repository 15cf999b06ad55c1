"""Exception hierarchy shared by the file formats and solvers."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class FormatError(Exception):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    def __init__(self, expected: bytes, got: bytes):
        super().__init__(f"bad magic: expected {expected!r}, got {got!r}")


class VersionError(FormatError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"version mismatch: expected {expected}, got {got}")


class TruncatedFileError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class InfeasibleError(Exception):
    """No surface configuration satisfies the hard constraints."""

"""Exception taxonomy shared across the package.

The command-line wrapper maps these onto exit codes: UsageError -> 1,
VerificationFailure -> 2, NumericalError -> 3.
"""


class UsageError(ValueError):
    """A caller violated an operation's stated precondition."""


class ParseError(UsageError):
    """A file or config could not be parsed; message carries the line number."""


class NumericalError(ArithmeticError):
    """A non-finite value surfaced where the contract forbids one."""


class VerificationFailure(RuntimeError):
    """A gradient or oracle self-check did not meet its tolerance."""

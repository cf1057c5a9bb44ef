"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto its exit codes: InputError -> 1,
ShapeError -> 2, NumericsError -> 3.
"""


class InputError(ValueError):
    """Malformed or unreadable input (bad file, bad record, missing votes)."""


class ShapeError(ValueError):
    """Dimension or configuration mismatch between pipeline stages."""


class NumericsError(RuntimeError):
    """Non-finite objective or diverging optimization."""

"""Exception types raised by the toolkit."""

from __future__ import annotations


class TaxopriorError(Exception):
    """Base class for all domain errors."""


class ParseError(TaxopriorError):
    """A text document failed to parse. Carries the 1-based location."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None, source: str | None = None):
        self.message = message
        self.line = line
        self.column = column
        self.source = source
        super().__init__(self._render())

    def _render(self) -> str:
        where = []
        if self.source:
            where.append(str(self.source))
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.column is not None:
            where.append(f"column {self.column}")
        return f"{self.message} ({', '.join(where)})" if where else self.message


class FormatError(TaxopriorError):
    """A binary or image artifact is malformed or holds invalid values."""


class ValidationError(TaxopriorError):
    """An object was used while it still has validation errors."""


class FallbackError(TaxopriorError):
    """A pixel has no admissible class under the ``error`` fallback policy."""

    def __init__(self, row: int, col: int, gt_id: int):
        self.row = row
        self.col = col
        self.gt_id = gt_id
        super().__init__(f"no admissible source class at pixel ({row}, {col}) with ground-truth id {gt_id}")

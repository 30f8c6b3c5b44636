from typing import Iterable, Optional


class MswlError(Exception):
    """Base class for errors surfaced by the multi-site LASSO services."""


class ConfigError(MswlError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class DataError(MswlError, ValueError):
    """Site data that violates the tabular schema or a numeric precondition."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateDesignError(DataError):
    """Covariate design (or a feature column) without enough variation to proceed."""


class ProtocolError(MswlError, RuntimeError):
    """Violation of the server/site round protocol."""

    def __init__(self, message: str, round: Optional[int] = None, site_id: Optional[str] = None):
        context = []
        if round is not None:
            context.append(f"round {round}")
        if site_id is not None:
            context.append(f"site '{site_id}'")
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)
        self.round = round
        self.site_id = site_id


class BarrierTimeoutError(ProtocolError):
    """Raised when a round barrier expires before every site reported."""

    def __init__(self, round: int, missing: Iterable[str]):
        self.missing = sorted(missing)
        super().__init__(f"Timed out waiting for reports from: {', '.join(self.missing)}", round=round)


class MessageError(ProtocolError):
    """A wire line that cannot be decoded into a valid message."""

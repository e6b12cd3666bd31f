"""Exception types shared across the package.

Every error raised by colpipe derives from ColpipeError so callers can
catch the library as a whole; subclasses carry the attribution fields
(row, column, sequence number) the engine promises in its contracts.
"""

from __future__ import annotations


class ColpipeError(Exception):
    """Base class for all colpipe errors."""


class FormatError(ColpipeError):
    """File or frame header is not in the expected binary format."""


class TruncatedFileError(ColpipeError):
    """Payload ended early; names the column that was being read."""

    def __init__(self, message: str, column_index: int):
        super().__init__(message)
        self.column_index = column_index


class WriteError(ColpipeError):
    """Sink write failure, with the number of bytes written so far."""

    def __init__(self, message: str, bytes_written: int):
        super().__init__(message)
        self.bytes_written = bytes_written


class SpecError(ColpipeError):
    """Pipeline description is unknown, misordered, or missing params."""


class DomainError(ColpipeError):
    """Operator input outside its domain (row index attached)."""

    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


class HexParseError(ColpipeError):
    """Non-hex character in a token; carries row and char position."""

    def __init__(self, message: str, row: int, position: int):
        super().__init__(message)
        self.row = row
        self.position = position


class ParameterError(ColpipeError):
    """Operator parameter out of range (e.g. modulus of zero)."""


class VocabRangeError(ColpipeError):
    """Value fed to vocabulary generation was >= the modulus range."""

    def __init__(self, message: str, value: int, row: int = -1):
        super().__init__(message)
        self.value = value
        self.row = row


class UnknownValueError(ColpipeError):
    """Value absent from a frozen vocabulary table during mapping."""

    def __init__(self, message: str, value: int, row: int):
        super().__init__(message)
        self.value = value
        self.row = row


class CapabilityError(ColpipeError):
    """Source cannot satisfy a required capability (e.g. replay)."""


class ProtocolError(ColpipeError):
    """Wire protocol violation; carries the frame sequence if known."""

    def __init__(self, message: str, sequence: int = -1,
                 expected: int = -1, actual: int = -1):
        super().__init__(message)
        self.sequence = sequence
        self.expected = expected
        self.actual = actual


class SchedulingError(ColpipeError):
    """Job set cannot be placed on the available slots."""


class ReconfigureTimeoutError(ColpipeError):
    """Slot failed to drain before the deadline and was quarantined."""

    def __init__(self, message: str, slot_id: int):
        super().__init__(message)
        self.slot_id = slot_id


class JobAbortedError(ColpipeError):
    """Job was cut short because its slot was reconfigured."""


class ServerBusyError(ColpipeError):
    """All service slots are occupied; the request may be retried."""


class RemoteError(ColpipeError):
    """Server-side failure relayed through an ERROR frame."""

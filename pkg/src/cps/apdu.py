"""ISO 7816-4 short APDU encoding, decoding and hex formatting.

A command carries a mandatory 4-byte header (cla, ins, p1, p2) followed by
one of four short-form trailers:

    case 1:  nothing
    case 2:  a single le byte (maximum expected response length)
    case 3:  an lc byte followed by exactly lc data bytes
    case 4:  lc byte, lc data bytes, then a trailing le byte

A response is a data field of arbitrary length (possibly empty) terminated
by the two mandatory status bytes sw1 sw2.  Extended-length (3-byte lc/le)
coding is rejected.  All functions here are pure and safe to call from any
number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass


class ApduError(ValueError):
    """Malformed APDU byte sequence."""


class TooShortError(ApduError):
    """Fewer bytes than the mandatory minimum (4 for commands, 2 for responses)."""


class LengthMismatchError(ApduError):
    """lc disagrees with the bytes actually present, or extended-length coding."""


class TrailingGarbageError(ApduError):
    """Bytes left over after a consistent case interpretation."""


class HexError(ValueError):
    """Text is not a valid hex byte string."""


class OddLengthError(HexError):
    """An odd number of hex digits."""


class NonHexCharacterError(HexError):
    """A character outside [0-9a-fA-F] and whitespace."""


class SW:
    """Status words used across the toolkit (success plus conventional errors)."""

    OK = 0x9000
    INS_NOT_SUPPORTED = 0x6D00
    FILE_NOT_FOUND = 0x6A82
    CONDITIONS_NOT_SATISFIED = 0x6985
    PIN_FAILED = 0x6300
    PIN_BLOCKED = 0x6983
    WRONG_LENGTH = 0x6700
    MIDDLEWARE_BLOCKED = 0x6F00


@dataclass(frozen=True)
class CommandApdu:
    """A command unit.  Empty ``data`` means "no body"; lc is implied.

    lc = 0 with an empty data field is representable but indistinguishable
    from an absent body: serialization emits no lc byte for it.
    """

    cla: int
    ins: int
    p1: int
    p2: int
    data: bytes = b""
    le: int | None = None

    def __post_init__(self) -> None:
        for name in ("cla", "ins", "p1", "p2"):
            value = getattr(self, name)
            if not 0 <= value <= 0xFF:
                raise ValueError(f"{name} out of byte range: {value!r}")
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) > 0xFF:
            raise ValueError(f"data too long for a single-byte lc: {len(self.data)}")
        if self.le is not None and not 0 <= self.le <= 0xFF:
            raise ValueError(f"le out of byte range: {self.le!r}")

    @property
    def lc(self) -> int:
        return len(self.data)

    @property
    def header(self) -> bytes:
        return bytes((self.cla, self.ins, self.p1, self.p2))

    def __str__(self) -> str:
        return format_hex(serialize_command(self))


@dataclass(frozen=True)
class ResponseApdu:
    """A response unit: data (possibly empty) plus the two status bytes."""

    data: bytes
    sw1: int
    sw2: int

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        for name in ("sw1", "sw2"):
            value = getattr(self, name)
            if not 0 <= value <= 0xFF:
                raise ValueError(f"{name} out of byte range: {value!r}")

    @classmethod
    def from_sw(cls, sw: int, data: bytes = b"") -> "ResponseApdu":
        return cls(data, (sw >> 8) & 0xFF, sw & 0xFF)

    @property
    def sw(self) -> int:
        return (self.sw1 << 8) | self.sw2

    @property
    def is_success(self) -> bool:
        return self.sw == SW.OK

    def __str__(self) -> str:
        return format_hex(serialize_response(self))


def parse_command(raw: bytes) -> CommandApdu:
    """Decode a short-form command APDU.

    Case resolution over the trailer (everything past the header): empty is
    case 1; one byte is case 2 (le); n >= 2 bytes whose first byte b equals
    n-1 is case 3; b == n-2 is case 4.  A zero first byte followed by two or
    more further bytes is the extended-length marker and is rejected.
    """
    raw = bytes(raw)
    if len(raw) < 4:
        raise TooShortError(f"command APDU needs at least 4 bytes, got {len(raw)}")
    cla, ins, p1, p2 = raw[0], raw[1], raw[2], raw[3]
    trailer = raw[4:]
    n = len(trailer)
    if n == 0:
        return CommandApdu(cla, ins, p1, p2)
    if n == 1:
        return CommandApdu(cla, ins, p1, p2, le=trailer[0])
    b = trailer[0]
    if b == 0 and n > 2:
        raise LengthMismatchError(
            "zero lc byte with a longer trailer: extended-length coding unsupported"
        )
    if b == n - 1:
        return CommandApdu(cla, ins, p1, p2, data=trailer[1:])
    if b == n - 2:
        return CommandApdu(cla, ins, p1, p2, data=trailer[1 : 1 + b], le=trailer[-1])
    if b > n - 1:
        raise LengthMismatchError(f"lc={b} but only {n - 1} trailer byte(s) follow")
    raise TrailingGarbageError(
        f"{n - 2 - b} byte(s) left over after a case-4 reading with lc={b}"
    )


def serialize_command(cmd: CommandApdu) -> bytes:
    """Encode a command; total on every valid CommandApdu."""
    out = bytearray(cmd.header)
    if cmd.data:
        out.append(len(cmd.data))
        out += cmd.data
    if cmd.le is not None:
        out.append(cmd.le)
    return bytes(out)


def parse_response(raw: bytes) -> ResponseApdu:
    """Decode a response: last two bytes are sw1/sw2, the prefix is data."""
    raw = bytes(raw)
    if len(raw) < 2:
        raise TooShortError(f"response APDU needs at least 2 bytes, got {len(raw)}")
    return ResponseApdu(raw[:-2], raw[-2], raw[-1])


def serialize_response(resp: ResponseApdu) -> bytes:
    return resp.data + bytes((resp.sw1, resp.sw2))


def format_hex(data: bytes) -> str:
    """Uppercase, space-separated hex pairs; empty string for no bytes."""
    return " ".join(f"{b:02X}" for b in data)


def parse_hex(text: str) -> bytes:
    """Parse whitespace-separated or contiguous hex pairs, case-insensitive."""
    digits = "".join(text.split())
    for ch in digits:
        if ch not in "0123456789abcdefABCDEF":
            raise NonHexCharacterError(f"not a hex digit: {ch!r}")
    if len(digits) % 2:
        raise OddLengthError(f"odd number of hex digits ({len(digits)})")
    return bytes.fromhex(digits)

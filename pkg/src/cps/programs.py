"""Certified straight-line signing programs and global legality.

A program is an ordered list of step templates.  A template's header bytes
are always concrete; its data field may contain placeholder holes:

    ${RN}          8 bytes, bound late to the card's most recent challenge
    ${PIN}         the reference PIN of the card type the program targets
    ${PAYLOAD:n}   n arbitrary bytes bound once per run

A command is globally legal at step position p when it matches the
template at p with any admissible placeholder values (RN and PAYLOAD are
wildcards of fixed width, PIN matches only the bound reference PIN).
Matching is purely syntactic over header bytes, data and le; no card state
is consulted, and le is compared literally.

All values here are immutable after load and safe to share across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .apdu import CommandApdu, parse_hex
from .documents import DocumentError, parse_document

RN_LENGTH = 8
DEFAULT_PIN_LENGTH = 8

_PLACEHOLDER_RE = re.compile(r"\$\{([A-Z]+)(?::(\d+))?\}")


class ProgramError(DocumentError):
    """Invalid program document."""


class MissingBindingError(KeyError):
    """A placeholder has no bound value."""


class PayloadLengthMismatchError(ValueError):
    """A bound payload does not have the declared width."""


class PositionOutOfRangeError(IndexError):
    """Step position at or beyond the end of the program."""


@dataclass(frozen=True)
class Hole:
    """A placeholder slot of fixed byte width inside a data field."""

    kind: str  # "RN" | "PIN" | "PAYLOAD"
    length: int


Segment = bytes | Hole


@dataclass(frozen=True)
class Bindings:
    """Concrete values for placeholder resolution.

    ``payloads`` is keyed by declared width so one run can bind several
    payload sizes.  ``rn`` is normally left unset and supplied late by the
    executor from the most recent challenge response.
    """

    pin: bytes | None = None
    payloads: dict[int, bytes] = field(default_factory=dict)
    rn: bytes | None = None

    def payload(self, length: int) -> bytes:
        if length not in self.payloads:
            raise MissingBindingError(f"no PAYLOAD binding of width {length}")
        value = self.payloads[length]
        if len(value) != length:
            raise PayloadLengthMismatchError(
                f"PAYLOAD bound {len(value)} bytes where {length} are declared"
            )
        return value


@dataclass(frozen=True)
class CommandPattern:
    """A command with concrete header and a data field that may hold holes."""

    cla: int
    ins: int
    p1: int
    p2: int
    segments: tuple[Segment, ...] = ()
    le: int | None = None

    @property
    def data_length(self) -> int:
        return sum(len(s) if isinstance(s, bytes) else s.length for s in self.segments)

    @property
    def is_concrete(self) -> bool:
        return all(isinstance(s, bytes) for s in self.segments)

    def has_hole(self, kind: str) -> bool:
        return any(isinstance(s, Hole) and s.kind == kind for s in self.segments)

    def matches(self, cmd: CommandApdu, pin: bytes | None = None) -> bool:
        """Syntactic match; RN/PAYLOAD holes are wildcards, PIN needs ``pin``.

        An unbound PIN hole degrades to a wildcard of its width.
        """
        if (cmd.cla, cmd.ins, cmd.p1, cmd.p2) != (self.cla, self.ins, self.p1, self.p2):
            return False
        if cmd.le != self.le:
            return False
        if len(cmd.data) != self.data_length:
            return False
        offset = 0
        for seg in self.segments:
            if isinstance(seg, bytes):
                if cmd.data[offset : offset + len(seg)] != seg:
                    return False
                offset += len(seg)
            else:
                if seg.kind == "PIN" and pin is not None and cmd.data[offset : offset + seg.length] != pin:
                    return False
                offset += seg.length
        return True

    def bind(self, bindings: Bindings) -> "CommandPattern":
        """Resolve PIN and PAYLOAD holes; RN holes are kept for late binding."""
        out: list[Segment] = []
        for seg in self.segments:
            if isinstance(seg, Hole) and seg.kind == "PIN":
                if bindings.pin is None:
                    raise MissingBindingError("no PIN binding")
                if len(bindings.pin) != seg.length:
                    raise PayloadLengthMismatchError(
                        f"PIN bound {len(bindings.pin)} bytes where {seg.length} are declared"
                    )
                out.append(bindings.pin)
            elif isinstance(seg, Hole) and seg.kind == "PAYLOAD":
                out.append(bindings.payload(seg.length))
            else:
                out.append(seg)
        return replace(self, segments=_merge_segments(out))

    def resolve(self, bindings: Bindings) -> CommandApdu:
        """Fully concrete command; RN holes take ``bindings.rn``."""
        bound = self.bind(bindings)
        data = bytearray()
        for seg in bound.segments:
            if isinstance(seg, bytes):
                data += seg
            else:  # RN hole
                if bindings.rn is None:
                    raise MissingBindingError("no RN binding")
                if len(bindings.rn) != seg.length:
                    raise PayloadLengthMismatchError(
                        f"RN bound {len(bindings.rn)} bytes where {seg.length} are declared"
                    )
                data += bindings.rn
        return CommandApdu(self.cla, self.ins, self.p1, self.p2, bytes(data), self.le)

    def to_command(self) -> CommandApdu:
        if not self.is_concrete:
            raise MissingBindingError("pattern still has placeholder holes")
        return CommandApdu(
            self.cla, self.ins, self.p1, self.p2, b"".join(self.segments), self.le
        )

    def to_wire_text(self) -> str:
        """Wire hex (lc and le included) with ${...} marks for holes."""
        parts = [f"{b:02X}" for b in (self.cla, self.ins, self.p1, self.p2)]
        if self.segments:
            parts.append(f"{self.data_length:02X}")
            for seg in self.segments:
                if isinstance(seg, bytes):
                    parts.extend(f"{b:02X}" for b in seg)
                elif seg.kind == "PAYLOAD":
                    parts.append(f"${{PAYLOAD:{seg.length}}}")
                else:
                    parts.append(f"${{{seg.kind}}}")
        if self.le is not None:
            parts.append(f"{self.le:02X}")
        return " ".join(parts)

    @classmethod
    def from_command(cls, cmd: CommandApdu) -> "CommandPattern":
        segments = (cmd.data,) if cmd.data else ()
        return cls(cmd.cla, cmd.ins, cmd.p1, cmd.p2, segments, cmd.le)


def _merge_segments(segments: list[Segment]) -> tuple[Segment, ...]:
    """Coalesce adjacent byte segments; drop empties."""
    out: list[Segment] = []
    for seg in segments:
        if isinstance(seg, bytes):
            if not seg:
                continue
            if out and isinstance(out[-1], bytes):
                out[-1] = out[-1] + seg
                continue
        out.append(seg)
    return tuple(out)


def _tokenize(text: str, pin_length: int) -> list[Segment]:
    """Split hex-with-placeholders text into byte runs and holes."""
    segments: list[Segment] = []
    pos = 0
    for match in _PLACEHOLDER_RE.finditer(text):
        if match.start() > pos:
            segments.append(parse_hex(text[pos : match.start()]))
        kind, arg = match.group(1), match.group(2)
        if kind == "RN":
            hole = Hole("RN", RN_LENGTH)
        elif kind == "PIN":
            hole = Hole("PIN", pin_length)
        elif kind == "PAYLOAD":
            if arg is None:
                raise ProgramError("PAYLOAD placeholder needs a width, e.g. ${PAYLOAD:117}")
            length = int(arg)
            if not 1 <= length <= 0xFF:
                raise ProgramError(f"PAYLOAD width out of range: {length}")
            hole = Hole("PAYLOAD", length)
        else:
            raise ProgramError(f"unknown placeholder ${{{kind}}}")
        if kind != "PAYLOAD" and arg is not None:
            raise ProgramError(f"placeholder ${{{kind}}} takes no width")
        segments.append(hole)
        pos = match.end()
    if pos < len(text):
        segments.append(parse_hex(text[pos:]))
    return list(_merge_segments(segments))


def _split_at(segments: list[Segment], count: int) -> tuple[list[Segment], list[Segment]]:
    """Split a segment list after ``count`` bytes; holes cannot be cut."""
    left: list[Segment] = []
    remaining = count
    for index, seg in enumerate(segments):
        width = len(seg) if isinstance(seg, bytes) else seg.length
        if remaining == 0:
            return left, segments[index:]
        if width <= remaining:
            left.append(seg)
            remaining -= width
            continue
        if isinstance(seg, bytes):
            left.append(seg[:remaining])
            return left, [seg[remaining:]] + segments[index + 1 :]
        raise ProgramError("a placeholder straddles the data/le boundary")
    if remaining:
        raise ProgramError(f"{remaining} byte(s) short of the declared length")
    return left, []


def pattern_from_wire(text: str, pin_length: int = DEFAULT_PIN_LENGTH) -> CommandPattern:
    """Parse full wire coding (lc and le bytes included) with placeholders."""
    segments = _tokenize(text, pin_length)
    if not segments or not isinstance(segments[0], bytes) or len(segments[0]) < 4:
        raise ProgramError("the 4 header bytes must be concrete")
    head = segments[0]
    cla, ins, p1, p2 = head[0], head[1], head[2], head[3]
    trailer: list[Segment] = ([head[4:]] if len(head) > 4 else []) + segments[1:]
    trailer = list(_merge_segments(trailer))
    total = sum(len(s) if isinstance(s, bytes) else s.length for s in trailer)
    if total == 0:
        return CommandPattern(cla, ins, p1, p2)
    if total == 1:
        if not isinstance(trailer[0], bytes):
            raise ProgramError("le byte must be concrete")
        return CommandPattern(cla, ins, p1, p2, le=trailer[0][0])
    if not isinstance(trailer[0], bytes):
        raise ProgramError("lc byte must be concrete")
    lc = trailer[0][0]
    rest = list(_merge_segments([trailer[0][1:]] + trailer[1:]))
    if lc == 0 and total > 2:
        raise ProgramError("zero lc with a longer trailer: extended coding unsupported")
    if lc == total - 1:
        return CommandPattern(cla, ins, p1, p2, tuple(rest))
    if lc == total - 2:
        data, tail = _split_at(rest, lc)
        if len(tail) != 1 or not isinstance(tail[0], bytes) or len(tail[0]) != 1:
            raise ProgramError("le byte must be a single concrete byte")
        return CommandPattern(cla, ins, p1, p2, tuple(_merge_segments(data)), le=tail[0][0])
    raise ProgramError(f"lc={lc} does not fit a case-3 or case-4 trailer of {total} bytes")


def pattern_from_step(
    header_and_data: str, le: int | None, pin_length: int = DEFAULT_PIN_LENGTH
) -> CommandPattern:
    """Parse the program-document form: header + data (no lc byte), le apart."""
    segments = _tokenize(header_and_data, pin_length)
    if not segments or not isinstance(segments[0], bytes) or len(segments[0]) < 4:
        raise ProgramError("the 4 header bytes must be concrete")
    head = segments[0]
    data = list(_merge_segments([head[4:]] + segments[1:]))
    pattern = CommandPattern(head[0], head[1], head[2], head[3], tuple(data), le)
    if pattern.data_length > 0xFF:
        raise ProgramError(f"data field too long: {pattern.data_length}")
    return pattern


@dataclass(frozen=True)
class StepTemplate:
    """One certified step: node label, human name, command pattern."""

    node: tuple[int, int]
    name: str
    pattern: CommandPattern
    expect_success: bool = True

    @property
    def label(self) -> str:
        return f"{self.node[0]},{self.node[1]}"


@dataclass(frozen=True)
class StraightLineProgram:
    """A branch-free command sequence certified for one card type.

    ``pin`` is bound by the library when the matching profile is known;
    until then PIN holes match any value of their width.
    """

    program_id: str
    card_profile_id: str
    steps: tuple[StepTemplate, ...]
    pin: bytes | None = None

    def __post_init__(self) -> None:
        if not self.steps:
            raise ProgramError(f"program {self.program_id!r} has no steps")
        indices = [step.node[1] for step in self.steps]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise ProgramError(
                f"program {self.program_id!r}: node labels must strictly increase"
            )

    def __len__(self) -> int:
        return len(self.steps)


def is_globally_legal(
    program: StraightLineProgram, position: int, cmd: CommandApdu
) -> bool:
    """True iff ``cmd`` matches the template at ``position``.

    Positions outside the program (including one past the end) are never
    legal.
    """
    if not 0 <= position < len(program.steps):
        return False
    return program.steps[position].pattern.matches(cmd, program.pin)


def next_expected(program: StraightLineProgram, position: int) -> StepTemplate:
    if not 0 <= position < len(program.steps):
        raise PositionOutOfRangeError(
            f"position {position} outside program of length {len(program.steps)}"
        )
    return program.steps[position]


def instantiate(
    program: StraightLineProgram, bindings: Bindings
) -> list[CommandPattern]:
    """Fill PIN and PAYLOAD holes for every step; RN stays late-bound."""
    if bindings.pin is None and program.pin is not None:
        bindings = replace(bindings, pin=program.pin)
    return [step.pattern.bind(bindings) for step in program.steps]


def _parse_node(value: str, line: int) -> tuple[int, int]:
    parts = value.split(",")
    try:
        if len(parts) != 2:
            raise ValueError
        return int(parts[0].strip()), int(parts[1].strip())
    except ValueError:
        raise ProgramError(f"bad node label {value!r}, expected 'i,j'", line) from None


PROGRAM_KEYS = {"id", "card_profile_id"}
STEP_KEYS = {"node", "name", "apdu", "le"}


def load_program(text: str, pin_length: int = DEFAULT_PIN_LENGTH) -> StraightLineProgram:
    """Parse a program document: one [program] header, ordered [step] blocks."""
    sections = parse_document(text)
    if not sections or sections[0].name != "program":
        raise ProgramError("document must start with a [program] section")
    head = sections[0]
    for key in head.fields:
        if key not in PROGRAM_KEYS:
            raise ProgramError(f"unknown [program] key {key!r}", head.line)
    program_id = head.require("id")
    profile_id = head.require("card_profile_id")

    steps: list[StepTemplate] = []
    for section in sections[1:]:
        if section.name != "step":
            raise ProgramError(f"unexpected section [{section.name}]", section.line)
        for key in section.fields:
            if key not in STEP_KEYS:
                raise ProgramError(f"unknown [step] key {key!r}", section.line)
        node = _parse_node(section.require("node"), section.line)
        le_raw = section.get("le")
        if le_raw is None or le_raw == "-":
            le = None
        else:
            try:
                le = int(le_raw, 16)
            except ValueError:
                raise ProgramError(f"bad le value {le_raw!r}", section.line) from None
            if not 0 <= le <= 0xFF:
                raise ProgramError(f"le out of range: {le_raw!r}", section.line)
        try:
            pattern = pattern_from_step(section.require("apdu"), le, pin_length)
        except (ProgramError, ValueError) as exc:
            raise ProgramError(f"bad apdu: {exc}", section.line) from None
        steps.append(
            StepTemplate(node=node, name=section.get("name", ""), pattern=pattern)
        )
    return StraightLineProgram(
        program_id=program_id, card_profile_id=profile_id, steps=tuple(steps)
    )

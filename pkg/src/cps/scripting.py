"""Interactive directives and script files.

Directive language (one per line, ``#`` starts a comment):

    reset                    replace the card with a fresh instance
    apdu <hex>               send one command, print the response
    expect <sw>              assert the status word of the last response
    bind PIN <hex>           set the PIN used for ${PIN}
    bind PAYLOAD <n> <hex>   set the n-byte value used for ${PAYLOAD:n}
    run <path>               execute a .seq sequence file on this card

The ``apdu`` argument accepts ${RN}, ${PIN} and ${PAYLOAD:n} placeholders;
RN takes the data field of the most recent successful challenge request.
When a program is selected, each command is also classified against it the
same way the engine classifies sequence steps.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .apdu import HexError, parse_hex
from .card import Card
from .engine import (
    CHALLENGE_INS,
    ZERO_RN,
    SeqItem,
    derive_payload,
    load_sequence,
    run_sequence,
)
from .library import Library
from .programs import (
    Bindings,
    ProgramError,
    StraightLineProgram,
    is_globally_legal,
    pattern_from_wire,
)

PROMPT = "cps> "


class DirectiveError(ValueError):
    pass


@dataclass
class ScriptSession:
    """One interactive card session with placeholder bindings."""

    library: Library
    profile_id: str
    program_id: str | None = None
    seed: int = 0
    card: Card = field(init=False)
    program: StraightLineProgram | None = field(init=False, default=None)
    position: int = field(init=False, default=0)
    bindings: Bindings = field(init=False)
    last_rn: bytes | None = field(init=False, default=None)
    responses: list = field(init=False, default_factory=list)
    failures: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        profile = self.library.profile(self.profile_id)
        self.card = Card(profile, self.seed)
        if self.program_id is not None:
            self.program = self.library.program(self.program_id)
        self.bindings = Bindings(pin=profile.pin, payloads={})

    def execute(self, line: str) -> list[str]:
        """Run one directive; returns the lines to print."""
        line = line.strip()
        if not line or line.startswith("#"):
            return []
        verb, _, rest = line.partition(" ")
        handler = getattr(self, f"_do_{verb.lower()}", None)
        if handler is None:
            self.failures += 1
            return [f"error: unknown directive {verb!r}"]
        try:
            return handler(rest.strip())
        except (DirectiveError, HexError, ProgramError, ValueError, KeyError) as exc:
            self.failures += 1
            return [f"error: {exc}"]

    # -- directives -----------------------------------------------------

    def _do_reset(self, rest: str) -> list[str]:
        if rest:
            raise DirectiveError("reset takes no argument")
        self.card = Card(self.card.profile, self.seed)
        self.position = 0
        self.last_rn = None
        return ["reset: fresh card instance"]

    def _do_apdu(self, rest: str) -> list[str]:
        if not rest:
            raise DirectiveError("apdu needs hex bytes")
        pattern = pattern_from_wire(rest, pin_length=len(self.card.profile.pin) or 8)
        needed = {
            seg.length
            for seg in pattern.segments
            if not isinstance(seg, bytes) and seg.kind == "PAYLOAD"
        }
        payloads = dict(self.bindings.payloads)
        for length in needed:
            payloads.setdefault(length, derive_payload(self.seed, length))
        cmd = pattern.resolve(
            replace(self.bindings, payloads=payloads, rn=self.last_rn or ZERO_RN)
        )
        response = self.card.execute(cmd)
        self.responses.append(response)
        if response.is_success and cmd.ins == CHALLENGE_INS and len(response.data) == 8:
            self.last_rn = response.data
        out = str(response) if response.data else f"{response.sw:04X}"
        return [out + self._classify(cmd, response)]

    def _classify(self, cmd, response) -> str:
        if self.program is None:
            return ""
        matched = next(
            (
                q
                for q in range(self.position, len(self.program.steps))
                if is_globally_legal(self.program, q, cmd)
            ),
            None,
        )
        if not response.is_success:
            return "  [case2]"
        if matched is None:
            return "  [case3 anomaly]"
        step = self.program.steps[matched]
        self.position = matched + 1
        return f"  [case1 {step.label} {step.name}]"

    def _do_expect(self, rest: str) -> list[str]:
        if not self.responses:
            self.failures += 1
            return ["EXPECT FAIL: no response yet"]
        want = int(rest, 16)
        got = self.responses[-1].sw
        if got == want:
            return [f"expect ok: {want:04X}"]
        self.failures += 1
        return [f"EXPECT FAIL: wanted {want:04X}, got {got:04X}"]

    def _do_bind(self, rest: str) -> list[str]:
        parts = rest.split(None, 1)
        if not parts:
            raise DirectiveError("bind needs PIN or PAYLOAD")
        kind = parts[0].upper()
        if kind == "PIN":
            if len(parts) != 2:
                raise DirectiveError("bind PIN <hex>")
            self.bindings = replace(self.bindings, pin=parse_hex(parts[1]))
            return [f"bound PIN ({len(self.bindings.pin)} bytes)"]
        if kind == "PAYLOAD":
            sub = parts[1].split(None, 1) if len(parts) == 2 else []
            if len(sub) != 2:
                raise DirectiveError("bind PAYLOAD <n> <hex>")
            length = int(sub[0])
            value = parse_hex(sub[1])
            if len(value) != length:
                raise DirectiveError(
                    f"payload is {len(value)} bytes, declared {length}"
                )
            payloads = dict(self.bindings.payloads)
            payloads[length] = value
            self.bindings = replace(self.bindings, payloads=payloads)
            return [f"bound PAYLOAD:{length}"]
        raise DirectiveError(f"cannot bind {kind!r}")

    def _do_run(self, rest: str) -> list[str]:
        if not rest:
            raise DirectiveError("run needs a sequence file path")
        path = Path(rest)
        items = load_sequence(path.read_text(), pin_length=len(self.card.profile.pin) or 8)
        if self.program is None:
            raise DirectiveError("select a program (--program) before running sequences")
        payloads: dict[int, bytes] = {}
        for item in items:
            for seg in item.pattern.segments:
                if not isinstance(seg, bytes) and seg.kind == "PAYLOAD":
                    payloads.setdefault(seg.length, derive_payload(self.seed, seg.length))
        payloads.update(self.bindings.payloads)
        report = run_sequence(
            self.card.profile,
            self.program,
            items,
            self.seed,
            card=self.card,
            bindings=Bindings(pin=self.bindings.pin, payloads=payloads),
        )
        self.position = (
            report.records[-1].position_after.get(self.program.program_id, 0)
            if report.records
            else 0
        )
        self.responses.extend(record.response for record in report.records)
        out = [
            f"{record.index:>3} {record.source:<20} {record.command} -> "
            f"{record.response.sw:04X} {record.classification.value}"
            for record in report.records
        ]
        out.append(str(report.verdict))
        return out


def run_script(session: ScriptSession, lines, out=None) -> int:
    """Execute directives; returns 0, or 1 when any expectation failed."""
    for line in lines:
        for text in session.execute(line):
            if out is not None:
                print(text, file=out)
    return 1 if session.failures else 0


def repl(session: ScriptSession, stdin=None, stdout=None) -> int:
    """Interactive loop; directive errors are reported and the loop continues."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    print(
        f"profile {session.profile_id}"
        + (f", program {session.program_id}" if session.program_id else "")
        + f", seed {session.seed}",
        file=stdout,
    )
    while True:
        print(PROMPT, end="", file=stdout, flush=True)
        line = stdin.readline()
        if not line:
            break
        if line.strip().lower() in ("quit", "exit"):
            break
        for text in session.execute(line):
            print(text, file=stdout)
    return 0

"""Sequence execution against a card, with per-step classification.

Every executed command is classified against the run's reference program:

    case1   the card answered success and the command is a certified step
            of the reference program taken in order
    case2   the card answered a non-success status word
    case3   the card answered success but the command is not certified at
            this point of the reference program (an anomaly: no error was
            raised, yet the certified flow was not followed)

Commands carry source tags naming the program and node they came from.
Only reference-sourced case1 records advance the reference position.  A
reference-sourced command is matched by scanning forward from the current
position: when earlier certified steps were replaced by modified stand-ins
(which classify as anomalies), the next genuine step still counts as
certified and the skipped-over steps are treated as consumed.  Commands
from any other source are never certified for this card, so they classify
as case3 whenever the card accepts them.

RN placeholders bind late: each one takes the data field of the most
recent successful challenge request (ins 84) in the same run, or eight
zero bytes when none has happened yet.  PAYLOAD placeholders bind to bytes
derived deterministically from the run seed unless the caller overrides
them, so a report is a pure function of (profile, reference, sequence,
seed).
"""

from __future__ import annotations

import hashlib
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

from .apdu import CommandApdu, ResponseApdu, format_hex, serialize_command
from .card import Card, CardProfile
from .programs import (
    Bindings,
    CommandPattern,
    StraightLineProgram,
    is_globally_legal,
    pattern_from_wire,
)

ZERO_RN = bytes(8)
CHALLENGE_INS = 0x84


class StepClass(str, Enum):
    """The three per-step outcomes."""

    OK = "case1"
    ERROR = "case2"
    ANOMALY = "case3"


@dataclass(frozen=True)
class SourceTag:
    """Where a sequence item came from: ``program_id:node`` or a free tag."""

    program_id: str
    node: str | None
    raw: str

    @classmethod
    def parse(cls, raw: str) -> "SourceTag":
        program_id, sep, node = raw.partition(":")
        return cls(program_id, node if sep else None, raw)

    def __str__(self) -> str:
        return self.raw


@dataclass(frozen=True)
class SeqItem:
    source: SourceTag
    pattern: CommandPattern


@dataclass(frozen=True)
class StepRecord:
    index: int
    source: str
    command: CommandApdu
    response: ResponseApdu
    classification: StepClass
    position_before: dict[str, int]
    position_after: dict[str, int]

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "source": self.source,
            "command": format_hex(serialize_command(self.command)),
            "response": str(self.response),
            "sw": f"{self.response.sw:04X}",
            "class": self.classification.value,
            "position_before": self.position_before,
            "position_after": self.position_after,
        }


@dataclass(frozen=True)
class Verdict:
    """Whole-run outcome.

    kind is one of completed / completed-with-anomalies / errored-at /
    incomplete; error-free runs that end before the reference program
    finishes report incomplete.
    """

    kind: str
    anomalies: int = 0
    error_index: int | None = None

    def __str__(self) -> str:
        if self.kind == "errored-at":
            return f"ErroredAt({self.error_index}), anomalies: {self.anomalies}"
        if self.kind == "incomplete":
            return f"Incomplete, anomalies: {self.anomalies}"
        return f"Completed, anomalies: {self.anomalies}"

    @property
    def is_completed(self) -> bool:
        return self.kind in ("completed", "completed-with-anomalies")


@dataclass(frozen=True)
class RunReport:
    run_id: str
    profile_id: str
    seed: int
    records: tuple[StepRecord, ...]
    verdict: Verdict
    final_card_destroyed: bool

    @property
    def anomaly_count(self) -> int:
        return sum(1 for r in self.records if r.classification is StepClass.ANOMALY)

    def summary_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "profile": self.profile_id,
            "seed": self.seed,
            "steps": len(self.records),
            "verdict": self.verdict.kind,
            "anomalies": self.verdict.anomalies,
            "error_index": self.verdict.error_index,
            "card_destroyed": self.final_card_destroyed,
        }


def derive_payload(seed: int, length: int) -> bytes:
    """Deterministic payload bytes for a run seed, independent of the card RNG."""
    key = hashlib.sha256(f"payload:{seed}:{length}".encode()).digest()
    return random.Random(int.from_bytes(key[:8], "big")).randbytes(length)


def default_bindings(profile: CardProfile, seed: int, items: Iterable[SeqItem]) -> Bindings:
    payloads: dict[int, bytes] = {}
    for item in items:
        for seg in item.pattern.segments:
            if not isinstance(seg, bytes) and seg.kind == "PAYLOAD":
                payloads.setdefault(seg.length, derive_payload(seed, seg.length))
    return Bindings(pin=profile.pin, payloads=payloads)


def items_from_program(program: StraightLineProgram) -> list[SeqItem]:
    """Tag every step of a program as a sequence item."""
    return [
        SeqItem(
            SourceTag(program.program_id, step.label, f"{program.program_id}:{step.label}"),
            step.pattern,
        )
        for step in program.steps
    ]


def load_sequence(text: str, pin_length: int = 8) -> list[SeqItem]:
    """Parse ``<source-tag> <hex-apdu-with-placeholders>`` lines."""
    items: list[SeqItem] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, _, rest = line.partition(" ")
        items.append(
            SeqItem(SourceTag.parse(tag), pattern_from_wire(rest.strip(), pin_length))
        )
    return items


def dump_sequence(items: Sequence[SeqItem]) -> str:
    width = max((len(item.source.raw) for item in items), default=0)
    return "".join(
        f"{item.source.raw:<{width}}  {item.pattern.to_wire_text()}\n" for item in items
    )


def run_sequence(
    profile: CardProfile,
    reference: StraightLineProgram,
    items: Sequence[SeqItem],
    seed: int,
    *,
    card: Card | None = None,
    bindings: Bindings | None = None,
    run_id: str | None = None,
) -> RunReport:
    """Execute the tagged commands in order on one card and classify them.

    A fresh card instance is created unless ``card`` is given, in which
    case it is warm-reset first (lifetime damage survives, which is how
    repeated runs on a destroyed card are modeled).
    """
    if card is None:
        card = Card(profile, seed)
    else:
        card.warm_reset()
    if bindings is None:
        bindings = default_bindings(profile, seed, items)
    if run_id is None:
        digest = hashlib.sha1(
            "\n".join(i.source.raw + " " + i.pattern.to_wire_text() for i in items).encode()
        ).hexdigest()[:8]
        run_id = f"{profile.profile_id}-s{seed}-{digest}"

    ref_id = reference.program_id
    counters: dict[str, int] = {ref_id: 0}
    current_rn: bytes | None = None
    records: list[StepRecord] = []

    for index, item in enumerate(items):
        cmd = item.pattern.resolve(replace(bindings, rn=current_rn or ZERO_RN))
        response = card.execute(cmd)
        success = response.is_success
        before = dict(counters)

        matched_at: int | None = None
        if item.source.program_id == ref_id:
            for q in range(counters[ref_id], len(reference.steps)):
                if is_globally_legal(reference, q, cmd):
                    matched_at = q
                    break
        else:
            counters[item.source.program_id] = counters.get(item.source.program_id, 0) + 1

        if not success:
            classification = StepClass.ERROR
        elif matched_at is not None:
            classification = StepClass.OK
            counters[ref_id] = matched_at + 1
        else:
            classification = StepClass.ANOMALY

        if success and cmd.ins == CHALLENGE_INS and len(response.data) == len(ZERO_RN):
            current_rn = response.data

        records.append(
            StepRecord(
                index=index,
                source=item.source.raw,
                command=cmd,
                response=response,
                classification=classification,
                position_before=before,
                position_after=dict(counters),
            )
        )

    verdict = _verdict(records, ref_id, len(reference.steps))
    return RunReport(
        run_id=run_id,
        profile_id=profile.profile_id,
        seed=seed,
        records=tuple(records),
        verdict=verdict,
        final_card_destroyed=card.state.destroyed,
    )


def _verdict(records: list[StepRecord], ref_id: str, length: int) -> Verdict:
    anomalies = sum(1 for r in records if r.classification is StepClass.ANOMALY)
    completion = next(
        (r.index for r in records if r.position_after.get(ref_id, 0) >= length), None
    )
    first_error = next(
        (r.index for r in records if r.classification is StepClass.ERROR), None
    )
    if first_error is not None and (completion is None or first_error < completion):
        return Verdict("errored-at", anomalies, first_error)
    if completion is None:
        return Verdict("incomplete", anomalies)
    if anomalies:
        return Verdict("completed-with-anomalies", anomalies)
    return Verdict("completed")


def run_many(
    profile: CardProfile,
    reference: StraightLineProgram,
    sequences: Iterable[Sequence[SeqItem]],
    seed: int,
    *,
    workers: int = 4,
) -> list[RunReport]:
    """Run independent sequences in parallel, one fresh card each.

    Reports come back in submission order regardless of scheduling.
    """
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(
            pool.map(lambda items: run_sequence(profile, reference, items, seed), sequences)
        )


def report_jsonl(report: RunReport) -> str:
    """Line-delimited records plus a trailing run summary object."""
    lines = [json.dumps(record.to_json()) for record in report.records]
    lines.append(json.dumps(report.summary_json()))
    return "\n".join(lines) + "\n"


def render_columns(report: RunReport) -> str:
    """Three-column table: first program's nodes, executed commands, others.

    Source tags whose node starts with "1," go to the left column, all
    other tagged sources to the right; anomalies are marked ``*`` and
    errors ``!``.
    """
    rows = []
    for record in report.records:
        tag = SourceTag.parse(record.source)
        node = tag.node or tag.raw
        left = node if tag.node is not None and node.startswith("1,") else ""
        right = node if not left else ""
        mark = {StepClass.OK: " ", StepClass.ERROR: "!", StepClass.ANOMALY: "*"}[
            record.classification
        ]
        wire = serialize_command(record.command)
        if len(wire) > 16:  # keep long data fields readable
            shown = f"{format_hex(wire[:10])} .. {format_hex(wire[-3:])} ({len(wire)} bytes)"
        else:
            shown = format_hex(wire)
        executed = f"{shown} -> {record.response.sw:04X} {mark}"
        rows.append((left, executed, right))
    left_w = max([len(r[0]) for r in rows] + [4])
    mid_w = max([len(r[1]) for r in rows] + [8])
    right_w = max([len(r[2]) for r in rows] + [4])
    header = f"{'P1':<{left_w}} | {'executed':<{mid_w}} | {'P2':<{right_w}}"
    ruler = "-" * len(header)
    body = [f"{l:<{left_w}} | {m:<{mid_w}} | {r:<{right_w}}" for l, m, r in rows]
    summary = f"{report.verdict}  (card destroyed: {report.final_card_destroyed})"
    return "\n".join([header, ruler, *body, ruler, summary]) + "\n"

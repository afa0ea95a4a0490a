"""Middleware that tracks sessions against certified programs.

Every client session is bound to one card and one certified program.  An
incoming command is checked, before it can touch the card, against the
program step the session currently expects:

    monitor     forward everything, warn on deviations (observation only)
    strict      forward only the expected certified step, block the rest
    chainguard  tolerate at most one out-of-order certified command per
                session; block commands foreign to the program outright,
                and block every further deviation once one was let through

Blocked commands never reach the card; the client receives a synthetic
response (6F00 with a marker byte) so middleware blocks are
distinguishable from card errors.  Anomaly accounting uses the pre-forward
check, not the card's answer: a forwarded command that then errors is
logged but does not advance the session position.

Cards are serial devices, so the gateway serializes command execution per
card; the merged per-card order is itself an interleaving of the sessions'
streams and is kept for audit.  Sessions update atomically under the card
lock and many sessions across many cards may run concurrently.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import IO

from .apdu import SW, CommandApdu, ResponseApdu, format_hex, serialize_command
from .card import Card
from .library import Library, UnknownProfileError
from .programs import StraightLineProgram, is_globally_legal

BLOCK_MARKER = 0x57
BLOCKED_RESPONSE = ResponseApdu(bytes([BLOCK_MARKER]), SW.MIDDLEWARE_BLOCKED >> 8, SW.MIDDLEWARE_BLOCKED & 0xFF)


class Policy(str, Enum):
    MONITOR = "monitor"
    STRICT = "strict"
    CHAIN_GUARD = "chainguard"


class Action(str, Enum):
    FORWARD = "forward"
    BLOCK = "block"
    WARN_AND_FORWARD = "warn-and-forward"


class Reason(str, Enum):
    MATCHED_EXPECTED = "matched-expected"
    EXTERNAL_COMMAND = "external-command"
    ANOMALY_CHAIN_LIMIT = "anomaly-chain-limit"
    PROGRAM_COMPLETE = "program-complete"


@dataclass(frozen=True)
class FilterDecision:
    action: Action
    reason: Reason

    @property
    def forwarded(self) -> bool:
        return self.action is not Action.BLOCK


class SessionClosedError(RuntimeError):
    pass


class UnknownCardError(KeyError):
    pass


class ProfileMismatchError(ValueError):
    """Program certified for a different card type; pass misroute to allow."""


@dataclass(frozen=True)
class FilterEvent:
    timestamp: float
    session_id: str
    decision: FilterDecision
    command: CommandApdu
    response: ResponseApdu
    position: int
    anomaly_count: int

    def to_json(self) -> dict:
        return {
            "ts": self.timestamp,
            "session": self.session_id,
            "decision": self.decision.action.value,
            "reason": self.decision.reason.value,
            "command": format_hex(serialize_command(self.command)),
            "response": str(self.response),
            "position": self.position,
            "anomaly_count": self.anomaly_count,
        }


@dataclass
class Session:
    session_id: str
    client_id: str
    card_id: str
    card: Card
    program: StraightLineProgram
    policy: Policy
    misroute: bool = False
    position: int = 0
    anomaly_count: int = 0
    closed: bool = False
    log: list[FilterEvent] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.position >= len(self.program.steps)


class Gateway:
    """Hosts cards, opens sessions, filters and serializes their commands."""

    def __init__(self, library: Library, *, seed: int = 0, audit: IO[str] | None = None):
        self.library = library
        self.seed = seed
        self._audit = audit
        self._registry_lock = threading.Lock()
        self._cards: dict[str, Card] = {}
        self._card_locks: dict[str, threading.Lock] = {}
        self._card_logs: dict[str, list[tuple[str, CommandApdu, ResponseApdu]]] = {}
        self._session_counter = 0

    # -- cards ----------------------------------------------------------

    def add_card(self, card_id: str, profile_id: str, seed: int | None = None) -> Card:
        profile = self.library.profile(profile_id)
        card = Card(profile, self.seed if seed is None else seed)
        with self._registry_lock:
            self._cards[card_id] = card
            self._card_locks[card_id] = threading.Lock()
            self._card_logs[card_id] = []
        return card

    def get_card(self, card_id: str) -> Card:
        """Fetch a card, lazily creating ``<profile>-<n>`` style ids."""
        with self._registry_lock:
            if card_id in self._cards:
                return self._cards[card_id]
        profile_id = card_id.rsplit("-", 1)[0]
        try:
            return self.add_card(card_id, profile_id)
        except UnknownProfileError:
            raise UnknownCardError(card_id) from None

    def card_log(self, card_id: str) -> list[tuple[str, CommandApdu, ResponseApdu]]:
        """Merged (session, command, response) order as seen by one card."""
        return list(self._card_logs[card_id])

    # -- sessions -------------------------------------------------------

    def open_session(
        self,
        client_id: str,
        card_id: str,
        program_id: str,
        policy: Policy | str,
        *,
        misroute: bool = False,
    ) -> Session:
        policy = Policy(policy)
        card = self.get_card(card_id)
        program = self.library.program(program_id)
        if program.card_profile_id != card.profile.profile_id and not misroute:
            raise ProfileMismatchError(
                f"program {program_id} is certified for {program.card_profile_id}, "
                f"card {card_id} is {card.profile.profile_id}"
            )
        with self._registry_lock:
            self._session_counter += 1
            session_id = f"s{self._session_counter}"
        return Session(
            session_id=session_id,
            client_id=client_id,
            card_id=card_id,
            card=card,
            program=program,
            policy=policy,
            misroute=misroute,
        )

    def close_session(self, session: Session) -> dict:
        session.closed = True
        forwarded = sum(1 for e in session.log if e.decision.forwarded)
        blocked = sum(1 for e in session.log if e.decision.action is Action.BLOCK)
        warned = sum(
            1 for e in session.log if e.decision.action is Action.WARN_AND_FORWARD
        )
        return {
            "session": session.session_id,
            "client": session.client_id,
            "card": session.card_id,
            "program": session.program.program_id,
            "policy": session.policy.value,
            "commands": len(session.log),
            "forwarded": forwarded,
            "blocked": blocked,
            "warned": warned,
            "anomaly_count": session.anomaly_count,
            "position": session.position,
            "completed": session.complete,
        }

    # -- filtering ------------------------------------------------------

    def filter_command(
        self, session: Session, cmd: CommandApdu
    ) -> tuple[FilterDecision, ResponseApdu]:
        """Decide, then execute or synthesize, one command for a session."""
        if session.closed:
            raise SessionClosedError(session.session_id)

        lock = self._card_locks[session.card_id]
        with lock:
            decision, skip_to = self._decide(session, cmd)
            if decision.forwarded:
                response = session.card.execute(cmd)
                self._card_logs[session.card_id].append(
                    (session.session_id, cmd, response)
                )
                if decision.action is Action.WARN_AND_FORWARD:
                    if decision.reason in (Reason.EXTERNAL_COMMAND, Reason.PROGRAM_COMPLETE):
                        session.anomaly_count += 1
                if response.is_success and skip_to is not None:
                    session.position = skip_to
            else:
                response = BLOCKED_RESPONSE
            event = FilterEvent(
                timestamp=time.time(),
                session_id=session.session_id,
                decision=decision,
                command=cmd,
                response=response,
                position=session.position,
                anomaly_count=session.anomaly_count,
            )
            session.log.append(event)
            if self._audit is not None:
                self._audit.write(json.dumps(event.to_json()) + "\n")
        return decision, response

    def _decide(
        self, session: Session, cmd: CommandApdu
    ) -> tuple[FilterDecision, int | None]:
        """Pre-forward decision; second value is the position after success."""
        program = session.program
        if session.complete:
            if session.policy is Policy.MONITOR:
                return FilterDecision(Action.WARN_AND_FORWARD, Reason.PROGRAM_COMPLETE), None
            return FilterDecision(Action.BLOCK, Reason.PROGRAM_COMPLETE), None

        if is_globally_legal(program, session.position, cmd):
            return (
                FilterDecision(Action.FORWARD, Reason.MATCHED_EXPECTED),
                session.position + 1,
            )

        if session.policy is Policy.MONITOR:
            return FilterDecision(Action.WARN_AND_FORWARD, Reason.EXTERNAL_COMMAND), None
        if session.policy is Policy.STRICT:
            return FilterDecision(Action.BLOCK, Reason.EXTERNAL_COMMAND), None

        # chainguard: one certified-but-out-of-order command may pass per
        # session; commands foreign to the program never do, and once the
        # allowance is spent every further deviation is chained off.
        if session.anomaly_count >= 1:
            return FilterDecision(Action.BLOCK, Reason.ANOMALY_CHAIN_LIMIT), None
        later = next(
            (
                q
                for q in range(session.position + 1, len(program.steps))
                if is_globally_legal(program, q, cmd)
            ),
            None,
        )
        if later is not None:
            return FilterDecision(Action.WARN_AND_FORWARD, Reason.EXTERNAL_COMMAND), later + 1
        return FilterDecision(Action.BLOCK, Reason.EXTERNAL_COMMAND), None

"""Long-running daemon speaking a newline-delimited ASCII protocol.

One watchdog session per connection.  Requests:

    SESSION <card-id> <program-id> <policy> [misroute]
    APDU <hex>
    RESET
    CLOSE

Responses: ``OK <hex>`` (response bytes, contiguous uppercase), ``BLOCKED
<reason>`` and ``ERR <code> <token>``.  Malformed lines always answer ERR
and keep the connection open.  Card ids take the form ``<profile>-<n>``
and are created lazily on first use, seeded from the daemon config, so a
fresh id is a fresh card.  APDU hex may contain ${RN}, ${PIN} and
${PAYLOAD:n} placeholders resolved exactly like the interactive mode does.

All card access funnels through the watchdog gateway, which serializes
commands per card; connections are served concurrently up to the
configured limit.  Shutdown finishes in-flight requests before returning.
"""

from __future__ import annotations

import logging
import socketserver
import threading
from dataclasses import dataclass

from .apdu import HexError
from .documents import DocumentError, parse_document
from .engine import CHALLENGE_INS, ZERO_RN, derive_payload
from .library import Library, UnknownProgramError
from .programs import Bindings, ProgramError, pattern_from_wire
from .watchdog import (
    Action,
    Gateway,
    Policy,
    ProfileMismatchError,
    UnknownCardError,
)

logger = logging.getLogger(__name__)

MAX_LINE = 4096


@dataclass
class DaemonConfig:
    """Daemon settings; ``port`` 0 asks the OS for an ephemeral port."""

    listen: str = "127.0.0.1"
    port: int = 9025
    policy: Policy = Policy.MONITOR
    max_connections: int = 8
    seed: int = 0
    profiles_dir: str | None = None
    programs_dir: str | None = None
    audit_log: str | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if self.max_connections < 1:
            raise ValueError("max_connections must be at least 1")


def load_config(text: str) -> DaemonConfig:
    sections = parse_document(text)
    if len(sections) != 1 or sections[0].name != "daemon":
        raise DocumentError("config must contain exactly one [daemon] section")
    section = sections[0]
    known = {
        "listen",
        "port",
        "policy",
        "max_connections",
        "seed",
        "profiles_dir",
        "programs_dir",
        "audit_log",
    }
    for key in section.fields:
        if key not in known:
            raise DocumentError(f"unknown [daemon] key {key!r}", section.line)
    if "seed" not in section.fields:
        raise DocumentError("daemon config must pin a seed", section.line)
    try:
        return DaemonConfig(
            listen=section.get("listen", "127.0.0.1"),
            port=int(section.get("port", "9025")),
            policy=Policy(section.get("policy", "monitor")),
            max_connections=int(section.get("max_connections", "8")),
            seed=int(section.require("seed")),
            profiles_dir=section.get("profiles_dir"),
            programs_dir=section.get("programs_dir"),
            audit_log=section.get("audit_log"),
        )
    except ValueError as exc:
        raise DocumentError(f"bad daemon config: {exc}", section.line) from None


class _Handler(socketserver.StreamRequestHandler):
    server: "DaemonServer"

    def handle(self) -> None:
        if not self.server.slots.acquire(blocking=False):
            self._reply("ERR 503 busy")
            return
        session = None
        last_rn: bytes | None = None
        try:
            while True:
                raw = self.rfile.readline(MAX_LINE)
                if not raw:
                    break
                if len(raw) >= MAX_LINE and not raw.endswith(b"\n"):
                    self._reply("ERR 400 line-too-long")
                    self._drain_line()
                    continue
                try:
                    line = raw.decode("ascii").strip()
                except UnicodeDecodeError:
                    self._reply("ERR 400 bad-encoding")
                    continue
                if not line:
                    self._reply("ERR 400 empty-line")
                    continue
                tokens = line.split()
                verb = tokens[0].upper()
                try:
                    if verb == "SESSION":
                        session, last_rn = self._open(session, tokens[1:], last_rn)
                    elif verb == "APDU":
                        last_rn = self._apdu(session, tokens[1:], last_rn)
                    elif verb == "RESET":
                        last_rn = self._reset(session, tokens[1:], last_rn)
                    elif verb == "CLOSE":
                        session = self._close(session, tokens[1:])
                    else:
                        self._reply("ERR 400 unknown-command")
                except BrokenPipeError:
                    raise
                except Exception:
                    logger.exception("unhandled protocol error")
                    self._reply("ERR 500 internal")
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            if session is not None and not session.closed:
                self.server.gateway.close_session(session)
            self.server.slots.release()

    def _drain_line(self) -> None:
        while True:
            chunk = self.rfile.readline(MAX_LINE)
            if not chunk or chunk.endswith(b"\n"):
                return

    def _reply(self, text: str) -> None:
        self.wfile.write((text + "\n").encode("ascii"))

    def _open(self, session, args, last_rn):
        if session is not None and not session.closed:
            self._reply("ERR 409 session-open")
            return session, last_rn
        if len(args) not in (3, 4) or (len(args) == 4 and args[3] != "misroute"):
            self._reply("ERR 400 bad-session-args")
            return session, last_rn
        card_id, program_id, policy_token = args[0], args[1], args[2]
        try:
            policy = Policy(policy_token.lower())
        except ValueError:
            self._reply("ERR 400 bad-policy")
            return session, last_rn
        try:
            new_session = self.server.gateway.open_session(
                client_id=f"{self.client_address[0]}:{self.client_address[1]}",
                card_id=card_id,
                program_id=program_id,
                policy=policy,
                misroute=len(args) == 4,
            )
        except UnknownCardError:
            self._reply("ERR 404 unknown-card")
            return session, last_rn
        except UnknownProgramError:
            self._reply("ERR 404 unknown-program")
            return session, last_rn
        except ProfileMismatchError:
            self._reply("ERR 403 profile-mismatch")
            return session, last_rn
        self._reply("OK 9000")
        return new_session, None

    def _apdu(self, session, args, last_rn):
        if session is None or session.closed:
            self._reply("ERR 409 no-session")
            return last_rn
        if not args:
            self._reply("ERR 400 bad-hex")
            return last_rn
        text = " ".join(args)
        profile = session.card.profile
        try:
            pattern = pattern_from_wire(text, pin_length=len(profile.pin) or 8)
        except (HexError, ProgramError, ValueError):
            self._reply("ERR 400 bad-hex")
            return last_rn
        needed = {
            seg.length
            for seg in pattern.segments
            if not isinstance(seg, bytes) and seg.kind == "PAYLOAD"
        }
        bindings = Bindings(
            pin=profile.pin,
            payloads={n: derive_payload(self.server.config.seed, n) for n in needed},
            rn=last_rn or ZERO_RN,
        )
        try:
            cmd = pattern.resolve(bindings)
        except (ValueError, KeyError):
            self._reply("ERR 400 bad-apdu")
            return last_rn
        decision, response = self.server.gateway.filter_command(session, cmd)
        if decision.action is Action.BLOCK:
            self._reply(f"BLOCKED {decision.reason.value}")
            return last_rn
        if response.is_success and cmd.ins == CHALLENGE_INS and len(response.data) == 8:
            last_rn = response.data
        self._reply("OK " + str(response).replace(" ", ""))
        return last_rn

    def _reset(self, session, args, last_rn):
        if args:
            self._reply("ERR 400 bad-reset-args")
            return last_rn
        if session is None or session.closed:
            self._reply("ERR 409 no-session")
            return last_rn
        session.card.warm_reset()
        session.position = 0
        session.anomaly_count = 0
        self._reply("OK 9000")
        return None

    def _close(self, session, args):
        if args:
            self._reply("ERR 400 bad-close-args")
            return session
        if session is None or session.closed:
            self._reply("ERR 409 no-session")
            return session
        self.server.gateway.close_session(session)
        self._reply("OK 9000")
        return None


class DaemonServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False  # shutdown drains in-flight handlers

    def __init__(self, config: DaemonConfig, library: Library | None = None):
        self.config = config
        if library is None:
            library = Library.with_builtins()
            if config.profiles_dir:
                library.load_directory(config.profiles_dir)
            if config.programs_dir:
                library.load_directory(config.programs_dir)
        self.library = library
        self._audit_file = open(config.audit_log, "a") if config.audit_log else None
        self.gateway = Gateway(library, seed=config.seed, audit=self._audit_file)
        self.slots = threading.BoundedSemaphore(config.max_connections)
        super().__init__((config.listen, config.port), _Handler)

    @property
    def bound_port(self) -> int:
        return self.server_address[1]

    def server_close(self) -> None:
        super().server_close()
        if self._audit_file is not None:
            self._audit_file.close()
            self._audit_file = None


def serve_forever(config: DaemonConfig) -> None:
    """Run until SIGINT/SIGTERM; in-flight commands finish before exit."""
    import signal

    server = DaemonServer(config)
    logger.info("listening on %s:%d", config.listen, server.bound_port)

    def _stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        logger.info("daemon stopped")

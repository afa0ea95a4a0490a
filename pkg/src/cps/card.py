"""Virtual smartcard state machines driven by declarative profiles.

A profile is an ordered rule list.  Each incoming command is matched
against the rules in order and the first hit decides the outcome: the
rule's state predicates are evaluated, a failed predicate answers the
rule's failure status word and leaves the card untouched, otherwise the
rule's effect runs and answers its success word.  A universal catch-all
rule (appended automatically when missing) answers "instruction not
supported", so every profile is total over the command space.

Cards never raise on a command: every failure is an in-band status word.

A Card object is one physical card instance.  ``warm_reset`` models a
power cycle (session state cleared, the security-environment object and
permanent damage survive); constructing a new Card is the analogue of
physically replacing the hardware.  A Card is a serial device: callers
must not execute commands on one instance from several threads at once.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass

from .apdu import SW, CommandApdu, ResponseApdu, parse_hex
from .documents import DocumentError, Section, parse_document

logger = logging.getLogger(__name__)

SIGNATURE_LENGTH = 128
CHALLENGE_LENGTH = 8
PIN_TRIES = 3

EFFECTS = (
    "select_mf",
    "select_ef",
    "mse_restore",
    "mse_set",
    "mse_erase",
    "get_challenge",
    "give_challenge",
    "verify_pin",
    "pso_sign",
    "noop",
    "reject",
)

PREDICATES = (
    "seo_present",
    "se_restored",
    "se_keyref_set",
    "pin_verified",
    "mf_selected",
    "ef_selected",
)

# Failure words a rule falls back to when the document does not set sw_fail.
DEFAULT_SW_FAIL = {
    "select_ef": SW.FILE_NOT_FOUND,
    "verify_pin": SW.PIN_FAILED,
    "reject": SW.INS_NOT_SUPPORTED,
}


class ProfileError(DocumentError):
    """Invalid profile document."""


class UnknownEffectError(ProfileError):
    pass


@dataclass(frozen=True)
class Rule:
    """One acceptance rule: header/lc/le pattern, predicates, effect, words.

    ``header`` holds four byte values with None as a per-byte wildcard.
    ``lc``/``le`` are sets of admissible values or None for "don't care";
    an lc constraint of {0} means "no body".
    """

    header: tuple[int | None, int | None, int | None, int | None]
    lc: frozenset[int] | None
    le: frozenset[int] | None
    require: tuple[str, ...]
    effect: str
    sw_ok: int
    sw_fail: int
    line: int = 0

    def matches(self, cmd: CommandApdu) -> bool:
        for want, got in zip(self.header, (cmd.cla, cmd.ins, cmd.p1, cmd.p2)):
            if want is not None and want != got:
                return False
        if self.lc is not None and len(cmd.data) not in self.lc:
            return False
        if self.le is not None and (cmd.le is None or cmd.le not in self.le):
            return False
        return True

    def shadows(self, other: "Rule") -> bool:
        """True when every command matching ``other`` also matches self."""
        for mine, theirs in zip(self.header, other.header):
            if mine is not None and (theirs is None or theirs != mine):
                return False
        if self.lc is not None and (other.lc is None or not other.lc <= self.lc):
            return False
        if self.le is not None and (other.le is None or not other.le <= self.le):
            return False
        return True


CATCH_ALL = Rule(
    header=(None, None, None, None),
    lc=None,
    le=None,
    require=(),
    effect="reject",
    sw_ok=SW.INS_NOT_SUPPORTED,
    sw_fail=SW.INS_NOT_SUPPORTED,
)


@dataclass(frozen=True)
class CardProfile:
    """Behavioral rules of one card type plus its fixed personalization."""

    profile_id: str
    rules: tuple[Rule, ...]
    initial_files: frozenset[str]
    pin: bytes
    seo_present_initially: bool = True
    default_seed: int = 0

    def first_match(self, cmd: CommandApdu) -> Rule:
        for rule in self.rules:
            if rule.matches(cmd):
                return rule
        return CATCH_ALL  # unreachable: rules always end with a catch-all


@dataclass
class CardState:
    """Mutable session and lifetime state of one card instance."""

    selected_file: str | None = None
    seo_present: bool = True
    se_restored: bool = False
    se_keyref_set: bool = False
    pin_verified: bool = False
    last_challenge: bytes | None = None
    host_challenge_given: bool = False
    destroyed: bool = False
    pin_retries: int = PIN_TRIES
    rng_seed: int = 0


def dummy_signature(profile_id: str, data: bytes) -> bytes:
    """Deterministic stand-in signature keyed by (profile, signing input)."""
    out = bytearray()
    tag = profile_id.encode() + b"\x00" + len(data).to_bytes(2, "big") + data
    counter = 0
    while len(out) < SIGNATURE_LENGTH:
        out += hashlib.sha256(tag + bytes([counter])).digest()
        counter += 1
    return bytes(out[:SIGNATURE_LENGTH])


class Card:
    """One card instance executing commands against its profile's rules."""

    def __init__(self, profile: CardProfile, seed: int):
        self.profile = profile
        self.seed = seed
        self.state = CardState(
            seo_present=profile.seo_present_initially, rng_seed=seed
        )
        self._rng = random.Random(seed)

    def warm_reset(self) -> None:
        """Power cycle: session state cleared, damage and the SEO survive."""
        st = self.state
        st.selected_file = None
        st.se_restored = False
        st.se_keyref_set = False
        st.pin_verified = False
        st.last_challenge = None
        st.host_challenge_given = False
        self._rng = random.Random(self.seed)

    def execute(self, cmd: CommandApdu) -> ResponseApdu:
        """Run one command.  Never raises: failures are status words."""
        rule = self.profile.first_match(cmd)
        st = self.state
        for predicate in rule.require:
            if not _PREDICATE_FNS[predicate](st):
                return ResponseApdu.from_sw(rule.sw_fail)
        return _EFFECT_FNS[rule.effect](self, rule, cmd)

    # effect handlers; rule predicates have already passed

    def _select_mf(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        self.state.selected_file = "MF"
        return ResponseApdu.from_sw(rule.sw_ok)

    def _select_ef(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        file_id = cmd.data.hex().upper()
        if file_id not in self.profile.initial_files:
            return ResponseApdu.from_sw(rule.sw_fail)
        self.state.selected_file = file_id
        return ResponseApdu.from_sw(rule.sw_ok)

    def _mse_restore(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        self.state.se_restored = True
        return ResponseApdu.from_sw(rule.sw_ok)

    def _mse_set(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        self.state.se_keyref_set = True
        return ResponseApdu.from_sw(rule.sw_ok)

    def _mse_erase(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        # Destroys the security environment object for the card's lifetime.
        st = self.state
        st.seo_present = False
        st.se_restored = False
        st.se_keyref_set = False
        st.destroyed = True
        return ResponseApdu.from_sw(rule.sw_ok)

    def _get_challenge(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        challenge = self._rng.randbytes(CHALLENGE_LENGTH)
        self.state.last_challenge = challenge
        return ResponseApdu.from_sw(rule.sw_ok, data=challenge)

    def _give_challenge(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        # The echoed value is not compared against the pending challenge,
        # and no pending challenge is needed; the command always lands.
        self.state.last_challenge = None
        self.state.host_challenge_given = True
        return ResponseApdu.from_sw(rule.sw_ok)

    def _verify_pin(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        st = self.state
        if st.pin_retries <= 0:
            return ResponseApdu.from_sw(SW.PIN_BLOCKED)
        if cmd.data == self.profile.pin:
            st.pin_verified = True
            st.pin_retries = PIN_TRIES
            return ResponseApdu.from_sw(rule.sw_ok)
        st.pin_retries -= 1
        return ResponseApdu.from_sw(rule.sw_fail)

    def _pso_sign(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        signature = dummy_signature(self.profile.profile_id, cmd.data)
        return ResponseApdu.from_sw(rule.sw_ok, data=signature)

    def _noop(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        return ResponseApdu.from_sw(rule.sw_ok)

    def _reject(self, rule: Rule, cmd: CommandApdu) -> ResponseApdu:
        return ResponseApdu.from_sw(rule.sw_fail)


_EFFECT_FNS = {
    "select_mf": Card._select_mf,
    "select_ef": Card._select_ef,
    "mse_restore": Card._mse_restore,
    "mse_set": Card._mse_set,
    "mse_erase": Card._mse_erase,
    "get_challenge": Card._get_challenge,
    "give_challenge": Card._give_challenge,
    "verify_pin": Card._verify_pin,
    "pso_sign": Card._pso_sign,
    "noop": Card._noop,
    "reject": Card._reject,
}

_PREDICATE_FNS = {
    "seo_present": lambda st: st.seo_present,
    "se_restored": lambda st: st.se_restored,
    "se_keyref_set": lambda st: st.se_keyref_set,
    "pin_verified": lambda st: st.pin_verified,
    "mf_selected": lambda st: st.selected_file == "MF",
    "ef_selected": lambda st: st.selected_file not in (None, "MF"),
}


def reset(profile: CardProfile, seed: int) -> Card:
    """Fresh card instance: the physical-replacement operation."""
    return Card(profile, seed)


def _parse_header_atom(token: str, line: int) -> int | None:
    if token == "*":
        return None
    try:
        value = int(token, 16)
    except ValueError:
        raise ProfileError(f"bad header byte {token!r}", line) from None
    if not 0 <= value <= 0xFF:
        raise ProfileError(f"header byte out of range: {token!r}", line)
    return value


def _parse_constraint(value: str, line: int) -> frozenset[int] | None:
    if value == "*":
        return None
    out = set()
    for part in value.split("|"):
        try:
            n = int(part, 16)
        except ValueError:
            raise ProfileError(f"bad constraint value {part!r}", line) from None
        if not 0 <= n <= 0xFF:
            raise ProfileError(f"constraint value out of range: {part!r}", line)
        out.add(n)
    return frozenset(out)


def _parse_match(value: str, line: int) -> tuple[tuple, frozenset | None, frozenset | None]:
    tokens = value.split()
    if len(tokens) < 4:
        raise ProfileError(f"match needs 4 header atoms, got {value!r}", line)
    header = tuple(_parse_header_atom(t, line) for t in tokens[:4])
    lc = le = None
    for token in tokens[4:]:
        key, sep, val = token.partition("=")
        if not sep or key not in ("lc", "le"):
            raise ProfileError(f"bad match constraint {token!r}", line)
        parsed = _parse_constraint(val, line)
        if key == "lc":
            lc = parsed
        else:
            le = parsed
    return header, lc, le


def _parse_sw(section: Section, key: str, default: int) -> int:
    raw = section.get(key)
    if raw is None:
        return default
    try:
        value = int(raw, 16)
    except ValueError:
        raise ProfileError(f"bad status word {raw!r}", section.line) from None
    if not 0 <= value <= 0xFFFF:
        raise ProfileError(f"status word out of range: {raw!r}", section.line)
    return value


RULE_KEYS = {"match", "require", "effect", "sw_ok", "sw_fail"}
PROFILE_KEYS = {"id", "pin", "seo", "files", "seed"}


def load_profile(text: str) -> CardProfile:
    """Parse a profile document; totality is ensured by an appended catch-all.

    A rule that can never fire because an earlier rule accepts everything it
    would is logged as a warning (first-match semantics make it dead code).
    """
    sections = parse_document(text)
    if not sections or sections[0].name != "profile":
        raise ProfileError("document must start with a [profile] section")
    head = sections[0]
    for key in head.fields:
        if key not in PROFILE_KEYS:
            raise ProfileError(f"unknown [profile] key {key!r}", head.line)
    profile_id = head.require("id")
    pin = parse_hex(head.get("pin", ""))
    seo = head.get("seo", "present").lower()
    if seo not in ("present", "absent"):
        raise ProfileError(f"seo must be 'present' or 'absent', got {seo!r}", head.line)
    files = frozenset(
        part.strip().replace(" ", "").upper()
        for part in head.get("files", "").split(",")
        if part.strip()
    )
    try:
        default_seed = int(head.get("seed", "0"))
    except ValueError:
        raise ProfileError("seed must be an integer", head.line) from None

    rules: list[Rule] = []
    for section in sections[1:]:
        if section.name != "rule":
            raise ProfileError(f"unexpected section [{section.name}]", section.line)
        for key in section.fields:
            if key not in RULE_KEYS:
                raise ProfileError(f"unknown [rule] key {key!r}", section.line)
        header, lc, le = _parse_match(section.require("match"), section.line)
        effect = section.require("effect")
        if effect not in EFFECTS:
            raise UnknownEffectError(f"unknown effect {effect!r}", section.line)
        require = tuple(
            part.strip() for part in section.get("require", "").split(",") if part.strip()
        )
        for predicate in require:
            if predicate not in PREDICATES:
                raise ProfileError(f"unknown predicate {predicate!r}", section.line)
        rule = Rule(
            header=header,
            lc=lc,
            le=le,
            require=require,
            effect=effect,
            sw_ok=_parse_sw(section, "sw_ok", SW.OK),
            sw_fail=_parse_sw(
                section, "sw_fail", DEFAULT_SW_FAIL.get(effect, SW.CONDITIONS_NOT_SATISFIED)
            ),
            line=section.line,
        )
        for earlier in rules:
            if earlier.shadows(rule):
                logger.warning(
                    "profile %s: rule at line %d is shadowed by rule at line %d",
                    profile_id,
                    rule.line,
                    earlier.line,
                )
                break
        rules.append(rule)

    def _universal(rule: Rule) -> bool:
        return rule.header == (None, None, None, None) and rule.lc is None and rule.le is None

    if not rules or not _universal(rules[-1]):
        rules.append(CATCH_ALL)
    return CardProfile(
        profile_id=profile_id,
        rules=tuple(rules),
        initial_files=files,
        pin=pin,
        seo_present_initially=(seo == "present"),
        default_seed=default_seed,
    )

import pytest

from cps.apdu import SW, CommandApdu
from cps.card import load_profile
from cps.engine import (
    StepClass,
    derive_payload,
    items_from_program,
    load_sequence,
    run_sequence,
)
from cps.interleave import enumerate_interleavings
from cps.library import Library, UnknownProgramError
from cps.programs import Bindings, load_program
from cps.watchdog import (
    BLOCK_MARKER,
    Action,
    Gateway,
    Policy,
    ProfileMismatchError,
    Reason,
    SessionClosedError,
    UnknownCardError,
)

MINICARD = """
[profile]
id = minicard
pin = 01 02 03 04 05 06 07 08
seo = present
files = MF

[rule]
match = 00 A4 00 00 lc=00
effect = select_mf

[rule]
match = 00 22 F3 03 lc=00
require = seo_present
effect = mse_restore

[rule]
match = 00 84 00 00 lc=00
effect = get_challenge

[rule]
match = 0C 20 00 9A lc=08
effect = verify_pin

[rule]
match = 8F 86 * * lc=02
effect = noop
"""

PROG_A = """
[program]
id = prog_a
card_profile_id = minicard

[step]
node = 1,1
name = Select MF
apdu = 00 A4 00 00
le = FF

[step]
node = 1,2
name = MSE Restore
apdu = 00 22 F3 03
le = 00

[step]
node = 1,3
name = Get Challenge
apdu = 00 84 00 00
le = 08

[step]
node = 1,4
name = Verify PIN
apdu = 0C 20 00 9A ${PIN}
le = 00
"""

# Four commands foreign to prog_a: two locally legal on the minicard (the
# 8F-class no-ops) and two the card rejects outright.
PROG_B = """
[program]
id = prog_b
card_profile_id = othercard

[step]
node = 2,1
name = Undefined no-op
apdu = 8F 86 00 00 14 00
le = 00

[step]
node = 2,2
name = Give Challenge (unsupported here)
apdu = 80 86 00 00 ${RN}
le = 00

[step]
node = 2,3
name = Undefined no-op
apdu = 8F 86 AC 45 14 00
le = 00

[step]
node = 2,4
name = Erase attempt (unsupported here)
apdu = 00 22 F4 03
le = -
"""


@pytest.fixture(scope="module")
def mini_library():
    lib = Library.with_builtins()
    lib.add_profile(load_profile(MINICARD))
    lib.add_program(load_program(PROG_A))
    lib.add_program(load_program(PROG_B))
    return lib


def resolve_items(items, pin, responses_rn=None):
    """Resolve patterns the way a client would, tracking live challenges."""
    bindings = Bindings(pin=pin, payloads={}, rn=bytes(8))
    return [item.pattern.resolve(bindings) for item in items]


def replay(gateway, session, items, pin):
    """Feed items through a session, resolving ${RN} from live responses."""
    last_rn = bytes(8)
    decisions = []
    for item in items:
        cmd = item.pattern.resolve(Bindings(pin=pin, payloads={}, rn=last_rn))
        decision, response = gateway.filter_command(session, cmd)
        if response.is_success and cmd.ins == 0x84 and len(response.data) == 8:
            last_rn = response.data
        decisions.append((decision, response))
    return decisions


class TestFilterBasics:
    def test_expected_step_forwards(self, mini_library):
        gateway = Gateway(mini_library, seed=1)
        session = gateway.open_session("c1", "minicard-0", "prog_a", Policy.STRICT)
        cmd = CommandApdu(0x00, 0xA4, 0x00, 0x00, le=0xFF)
        decision, response = gateway.filter_command(session, cmd)
        assert decision.action is Action.FORWARD
        assert decision.reason is Reason.MATCHED_EXPECTED
        assert response.sw == SW.OK and session.position == 1

    def test_strict_blocks_modified_command(self, library):
        gateway = Gateway(library, seed=1)
        session = gateway.open_session("c1", "incrypto-0", "incrypto_P1", "strict")
        gateway.filter_command(session, CommandApdu(0x00, 0xA4, 0x00, 0x00, le=0xFF))
        modified = CommandApdu(0x81, 0x86, 0x00, 0x00, bytes.fromhex("1400"), 0x00)
        decision, response = gateway.filter_command(session, modified)
        assert decision.action is Action.BLOCK
        assert decision.reason is Reason.EXTERNAL_COMMAND
        assert response.sw == SW.MIDDLEWARE_BLOCKED
        assert response.data == bytes([BLOCK_MARKER])
        assert session.position == 1  # unchanged

    def test_chainguard_second_anomaly_blocked(self, mini_library):
        gateway = Gateway(mini_library, seed=1)
        session = gateway.open_session("c1", "minicard-1", "prog_a", Policy.CHAIN_GUARD)
        session.anomaly_count = 1  # one anomaly already tolerated
        external = CommandApdu(0x8F, 0x86, 0x00, 0x00, bytes.fromhex("1400"), 0x00)
        decision, _ = gateway.filter_command(session, external)
        assert decision.action is Action.BLOCK
        assert decision.reason is Reason.ANOMALY_CHAIN_LIMIT

    def test_chainguard_tolerates_one_skip_ahead(self, mini_library):
        gateway = Gateway(mini_library, seed=1)
        session = gateway.open_session("c1", "minicard-2", "prog_a", Policy.CHAIN_GUARD)
        skip = CommandApdu(0x00, 0x22, 0xF3, 0x03, le=0x00)  # step 1,2 at position 0
        decision, response = gateway.filter_command(session, skip)
        assert decision.action is Action.WARN_AND_FORWARD
        assert session.anomaly_count == 1 and session.position == 2
        # a second out-of-order certified command is chained off
        pin = mini_library.profile("minicard").pin
        late = CommandApdu(0x0C, 0x20, 0x00, 0x9A, pin, 0x00)  # step 1,4 at position 2
        decision, _ = gateway.filter_command(session, late)
        assert decision.action is Action.BLOCK
        assert decision.reason is Reason.ANOMALY_CHAIN_LIMIT

    def test_chainguard_blocks_foreign_commands_outright(self, mini_library):
        gateway = Gateway(mini_library, seed=1)
        session = gateway.open_session("c1", "minicard-3", "prog_a", Policy.CHAIN_GUARD)
        foreign = CommandApdu(0x00, 0x22, 0xF4, 0x03)
        decision, _ = gateway.filter_command(session, foreign)
        assert decision.action is Action.BLOCK
        assert decision.reason is Reason.EXTERNAL_COMMAND
        assert session.anomaly_count == 0

    def test_program_complete_handling(self, mini_library):
        gateway = Gateway(mini_library, seed=1)
        pin = mini_library.profile("minicard").pin
        for policy, action in (
            (Policy.STRICT, Action.BLOCK),
            (Policy.MONITOR, Action.WARN_AND_FORWARD),
        ):
            session = gateway.open_session("c1", f"minicard-{policy.value}", "prog_a", policy)
            items = items_from_program(mini_library.program("prog_a"))
            replay(gateway, session, items, pin)
            assert session.complete
            decision, _ = gateway.filter_command(
                session, CommandApdu(0x00, 0xA4, 0x00, 0x00, le=0xFF)
            )
            assert decision.action is action
            assert decision.reason is Reason.PROGRAM_COMPLETE

    def test_closed_session_raises(self, mini_library):
        gateway = Gateway(mini_library, seed=1)
        session = gateway.open_session("c1", "minicard-4", "prog_a", Policy.MONITOR)
        gateway.close_session(session)
        with pytest.raises(SessionClosedError):
            gateway.filter_command(session, CommandApdu(0, 0xA4, 0, 0, le=0xFF))

    def test_forwarded_error_does_not_advance(self, mini_library):
        gateway = Gateway(mini_library, seed=1)
        session = gateway.open_session("c1", "minicard-5", "prog_a", Policy.MONITOR)
        card = gateway.get_card("minicard-5")
        card.state.seo_present = False  # make step 1,2 fail on the card
        gateway.filter_command(session, CommandApdu(0x00, 0xA4, 0x00, 0x00, le=0xFF))
        decision, response = gateway.filter_command(
            session, CommandApdu(0x00, 0x22, 0xF3, 0x03, le=0x00)
        )
        assert decision.action is Action.FORWARD
        assert not response.is_success
        assert session.position == 1


class TestOpenSession:
    def test_open_and_close(self, library):
        gateway = Gateway(library, seed=0)
        session = gateway.open_session("c1", "incrypto-0", "incrypto_P1", "strict")
        assert session.position == 0 and session.anomaly_count == 0
        audit = gateway.close_session(session)
        assert audit["session"] == session.session_id
        assert audit["commands"] == 0 and audit["completed"] is False

    def test_unknown_card_profile(self, library):
        gateway = Gateway(library, seed=0)
        with pytest.raises(UnknownCardError):
            gateway.open_session("c1", "nosuch-0", "incrypto_P1", "strict")

    def test_unknown_program(self, library):
        gateway = Gateway(library, seed=0)
        with pytest.raises(UnknownProgramError):
            gateway.open_session("c1", "incrypto-0", "nosuch", "strict")

    def test_profile_mismatch_needs_misroute(self, library):
        gateway = Gateway(library, seed=0)
        with pytest.raises(ProfileMismatchError):
            gateway.open_session("c1", "infineon-0", "incrypto_P1", "monitor")
        session = gateway.open_session(
            "c1", "infineon-0", "incrypto_P1", "monitor", misroute=True
        )
        assert session.misroute is True


class TestEquivalenceWithOfflineClassifier:
    def _programs(self, mini_library):
        profile = mini_library.profile("minicard")
        prog_a = mini_library.program("prog_a")
        prog_b = mini_library.program("prog_b")
        return profile, prog_a, prog_b

    def test_monitor_warns_exactly_where_engine_flags_externals(self, mini_library):
        profile, prog_a, prog_b = self._programs(mini_library)
        items_a = items_from_program(prog_a)
        items_b = items_from_program(prog_b)
        merges = list(enumerate_interleavings(items_a, items_b))
        assert len(merges) == 70
        for index, merged in enumerate(merges):
            report = run_sequence(profile, prog_a, merged, seed=9)
            offline = [
                r.index
                for r in report.records
                if r.classification is StepClass.ANOMALY
                or (
                    r.classification is StepClass.ERROR
                    and not r.source.startswith("prog_a:")
                )
            ]
            gateway = Gateway(mini_library, seed=9)
            session = gateway.open_session(
                "client", f"minicard-eq{index}", "prog_a", Policy.MONITOR
            )
            decisions = replay(gateway, session, merged, profile.pin)
            online = [
                i
                for i, (decision, _) in enumerate(decisions)
                if decision.action is Action.WARN_AND_FORWARD
            ]
            assert online == offline, f"merge {index}"
            assert session.anomaly_count == len(offline)

    def test_strict_forwards_only_certified_prefix(self, mini_library):
        profile, prog_a, prog_b = self._programs(mini_library)
        items_a = items_from_program(prog_a)
        items_b = items_from_program(prog_b)
        certified = resolve_items(items_a, profile.pin)
        for index, merged in enumerate(enumerate_interleavings(items_a, items_b)):
            gateway = Gateway(mini_library, seed=9)
            card_id = f"minicard-st{index}"
            session = gateway.open_session("client", card_id, "prog_a", Policy.STRICT)
            replay(gateway, session, merged, profile.pin)
            seen = [cmd for _, cmd, _ in gateway.card_log(card_id)]
            assert seen == certified, f"merge {index}"
            assert session.anomaly_count == 0
            assert session.complete

    def test_chainguard_never_forwards_a_second_anomaly(self, mini_library):
        profile, prog_a, prog_b = self._programs(mini_library)
        items_a = items_from_program(prog_a)
        items_b = items_from_program(prog_b)
        for index, merged in enumerate(enumerate_interleavings(items_a, items_b)):
            gateway = Gateway(mini_library, seed=9)
            session = gateway.open_session(
                "client", f"minicard-cg{index}", "prog_a", Policy.CHAIN_GUARD
            )
            decisions = replay(gateway, session, merged, profile.pin)
            warned = sum(
                1 for d, _ in decisions if d.action is Action.WARN_AND_FORWARD
            )
            assert warned <= 1
            assert session.anomaly_count <= 1


class TestPrevention:
    @pytest.mark.parametrize("policy", [Policy.STRICT, Policy.CHAIN_GUARD])
    def test_destructive_sequence_is_defused(self, library, policy):
        items = load_sequence(library.sequence_text("fig3"))
        gateway = Gateway(library, seed=7)
        card_id = f"incrypto-prev-{policy.value}"
        session = gateway.open_session("client", card_id, "incrypto_P1", policy)
        profile = library.profile("incrypto")
        from cps.engine import derive_payload

        last_rn = bytes(8)
        decisions = []
        for item in items:
            bindings = Bindings(
                pin=profile.pin,
                payloads={117: derive_payload(7, 117)},
                rn=last_rn,
            )
            cmd = item.pattern.resolve(bindings)
            decision, response = gateway.filter_command(session, cmd)
            if response.is_success and cmd.ins == 0x84 and len(response.data) == 8:
                last_rn = response.data
            decisions.append((item, decision, response))

        erase = next(d for d in decisions if d[0].source.program_id == "mutation")
        assert erase[1].action is Action.BLOCK
        card = gateway.get_card(card_id)
        assert card.state.destroyed is False
        # the certified flow completed through the same session
        assert session.complete
        assert len(decisions[-1][2].data) == 128  # signature delivered

    def test_unfiltered_reproduction_destroys(self, library):
        # control: the same sequence without a watchdog kills the card
        items = load_sequence(library.sequence_text("fig3"))
        report = run_sequence(
            library.profile("incrypto"), library.program("incrypto_P1"), items, seed=7
        )
        assert report.final_card_destroyed is True


class TestMultiplex:
    def test_single_session_order_is_session_order(self, library):
        gateway = Gateway(library, seed=3)
        session = gateway.open_session("c1", "incrypto-m0", "incrypto_P1", "monitor")
        items = items_from_program(library.program("incrypto_P1"))
        replay(gateway, session, items, library.profile("incrypto").pin)
        log = gateway.card_log("incrypto-m0")
        assert [cmd for _, cmd, _ in log] == [e.command for e in session.log]

    def test_two_sessions_merge_into_one_interleaving(self, library):
        profile = library.profile("incrypto")
        program = library.program("incrypto_P1")
        pair = library.program("challenge_pair")
        items_a = items_from_program(program)
        items_b = items_from_program(pair)
        # scripted arrival order: pair lands between steps 1 and 2
        merged = [items_a[0], items_b[0], items_b[1], *items_a[1:]]

        gateway = Gateway(library, seed=3)
        s1 = gateway.open_session("c1", "incrypto-m1", "incrypto_P1", "monitor")
        s2 = gateway.open_session("c2", "incrypto-m1", "challenge_pair", "monitor")
        last_rn = {id(s1): bytes(8), id(s2): bytes(8)}
        from cps.engine import derive_payload

        for item in merged:
            session = s1 if item.source.program_id == "incrypto_P1" else s2
            bindings = Bindings(
                pin=profile.pin,
                payloads={117: derive_payload(3, 117)},
                rn=last_rn[id(session)],
            )
            cmd = item.pattern.resolve(bindings)
            _, response = gateway.filter_command(session, cmd)
            if response.is_success and cmd.ins == 0x84 and len(response.data) == 8:
                last_rn[id(session)] = response.data

        log = gateway.card_log("incrypto-m1")
        assert len(log) == 12
        # the merged order at the card is exactly the scripted interleaving
        offline = run_sequence(profile, program, merged, seed=3)
        assert [cmd for _, cmd, _ in log] == [r.command for r in offline.records]
        assert [resp for _, _, resp in log] == [r.response for r in offline.records]
        # cross-check: the second session's commands are anomalies against
        # the first session's program in the offline classification
        pair_indices = [
            r.index for r in offline.records if r.source.startswith("challenge_pair:")
        ]
        assert all(
            offline.records[i].classification is StepClass.ANOMALY for i in pair_indices
        )
        # while each session tracked its own program without interference
        assert s1.complete and s1.anomaly_count == 0
        assert s2.complete and s2.anomaly_count == 0

    def test_strict_session_protects_against_interferer(self, library):
        profile = library.profile("incrypto")
        program = library.program("incrypto_P1")
        gateway = Gateway(library, seed=3)
        s1 = gateway.open_session("c1", "incrypto-m2", "incrypto_P1", "strict")
        s2 = gateway.open_session(
            "c2", "incrypto-m2", "table2_P2", "strict", misroute=True
        )
        items_a = items_from_program(program)
        items_b = items_from_program(library.program("table2_P2"))
        blocked = 0
        last_rn = bytes(8)
        for index, item in enumerate(items_a):
            bindings = Bindings(
                pin=profile.pin,
                payloads={117: __import__("cps.engine", fromlist=["derive_payload"]).derive_payload(3, 117)},
                rn=last_rn,
            )
            cmd = item.pattern.resolve(bindings)
            _, response = gateway.filter_command(s1, cmd)
            if response.is_success and cmd.ins == 0x84 and len(response.data) == 8:
                last_rn = response.data
            if index < len(items_b):
                alien = items_b[index].pattern.resolve(
                    Bindings(pin=profile.pin, payloads={}, rn=bytes(8))
                )
                decision, _ = gateway.filter_command(s2, alien)
                if decision.action is Action.BLOCK:
                    blocked += 1
        assert blocked == len(items_b)  # every interferer command blocked
        assert s1.complete and s1.anomaly_count == 0
        # card saw only the certified commands
        seen = [cmd for _, cmd, _ in gateway.card_log("incrypto-m2")]
        assert len(seen) == len(items_a)


class TestAudit:
    def test_jsonl_audit_stream(self, library, tmp_path):
        import json

        path = tmp_path / "audit.jsonl"
        with open(path, "w") as fh:
            gateway = Gateway(library, seed=1, audit=fh)
            session = gateway.open_session("c1", "incrypto-a0", "incrypto_P1", "monitor")
            gateway.filter_command(session, CommandApdu(0x00, 0xA4, 0x00, 0x00, le=0xFF))
            gateway.filter_command(
                session, CommandApdu(0x8F, 0x86, 0x00, 0x00, bytes.fromhex("1400"), 0x00)
            )
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == 2
        assert rows[0]["decision"] == "forward" and rows[0]["position"] == 1
        assert rows[1]["decision"] == "warn-and-forward"
        assert rows[1]["reason"] == "external-command"
        assert rows[1]["anomaly_count"] == 1
        assert {"ts", "session", "command", "response"} <= rows[0].keys()

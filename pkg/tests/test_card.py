import logging

import pytest

from cps.apdu import SW, CommandApdu, parse_command
from cps.card import (
    Card,
    ProfileError,
    UnknownEffectError,
    dummy_signature,
    load_profile,
    reset,
)

from conftest import PAYLOAD_VEC, PIN_VEC, table1_wire_rows, table2_wire_rows


def cmd(hexstr: str) -> CommandApdu:
    return parse_command(bytes.fromhex(hexstr))


def run_rows(card: Card, rows, rn_slots=()):
    """Execute wire rows in order, rebinding RN slots to live challenges."""
    responses = []
    last_challenge = b"\x00" * 8
    for index, row in enumerate(rows):
        command = cmd(row)
        if index in rn_slots:
            command = CommandApdu(
                command.cla, command.ins, command.p1, command.p2, last_challenge, command.le
            )
        response = card.execute(command)
        if response.is_success and command.ins == 0x84 and len(response.data) == 8:
            last_challenge = response.data
        responses.append(response)
    return responses


class TestReset:
    def test_initial_state(self, library):
        card = reset(library.profile("incrypto"), 7)
        assert card.state.seo_present is True
        assert card.state.pin_verified is False
        assert card.state.selected_file is None
        assert card.state.destroyed is False

    def test_determinism_including_rng(self, library):
        profile = library.profile("incrypto")
        a, b = reset(profile, 7), reset(profile, 7)
        assert a.state == b.state
        get = cmd("0084000008")
        for _ in range(5):
            assert a.execute(get).data == b.execute(get).data

    def test_seo_absent_profile(self):
        profile = load_profile("[profile]\nid = bare\npin = 00\nseo = absent\n")
        assert reset(profile, 0).state.seo_present is False


class TestIncryptoConformance:
    def test_table1_clean_run_with_signature(self, library):
        card = Card(library.profile("incrypto"), 3)
        responses = run_rows(card, table1_wire_rows(), rn_slots={5, 8})
        assert all(r.sw == SW.OK for r in responses)
        assert len(responses[-1].data) == 128

    def test_table2_every_row_locally_legal(self, library):
        card = Card(library.profile("incrypto"), 3)
        responses = run_rows(card, table2_wire_rows(), rn_slots={3, 9, 13})
        assert all(r.sw == SW.OK for r in responses)

    def test_loop_back_after_every_prefix(self, library):
        rows = table2_wire_rows()
        rn_slots = {3, 9, 13}
        for prefix in range(1, len(rows) + 1):
            card = Card(library.profile("incrypto"), 3)
            looped = rows[:prefix] + [rows[0]] + rows[prefix:]
            slots = {i if i < prefix else i + 1 for i in rn_slots}
            responses = run_rows(card, looped, rn_slots=slots)
            assert all(r.sw == SW.OK for r in responses), f"prefix {prefix}"

    def test_undefined_instruction_accepted_as_noop(self, library):
        card = Card(library.profile("incrypto"), 1)
        before = (card.state.selected_file, card.state.se_restored)
        response = card.execute(cmd("8F86000002140000"))
        assert response.sw == SW.OK
        assert (card.state.selected_file, card.state.se_restored) == before

    def test_unknown_ins_rejected(self, library):
        card = Card(library.profile("incrypto"), 1)
        assert card.execute(cmd("00B0000010")).sw == SW.INS_NOT_SUPPORTED

    def test_unknown_ef(self, library):
        card = Card(library.profile("incrypto"), 1)
        assert card.execute(cmd("00A4000002999900")).sw == SW.FILE_NOT_FOUND


class TestErase:
    def test_erase_after_step_two_breaks_restore(self, library):
        card = Card(library.profile("incrypto"), 5)
        assert card.execute(cmd("00A40000FF")).sw == SW.OK
        assert card.execute(cmd("00A40000021400FF")).sw == SW.OK
        assert card.execute(cmd("0022F403")).sw == SW.OK  # erase, no PIN needed
        assert card.state.seo_present is False
        assert card.state.destroyed is True
        assert card.execute(cmd("0022F30300")).sw == SW.CONDITIONS_NOT_SATISFIED

    def test_destruction_survives_warm_reset(self, library):
        card = Card(library.profile("incrypto"), 5)
        card.execute(cmd("0022F403"))
        for _ in range(10):
            card.warm_reset()
            assert card.state.destroyed is True
            assert card.execute(cmd("00A40000FF")).sw == SW.OK
            assert card.execute(cmd("00A40000021400FF")).sw == SW.OK
            assert card.execute(cmd("0022F30300")).sw == SW.CONDITIONS_NOT_SATISFIED

    def test_erase_needs_no_pin(self, library):
        card = Card(library.profile("incrypto"), 5)
        assert card.state.pin_verified is False
        assert card.execute(cmd("0022F403")).sw == SW.OK

    def test_replacement_restores_function(self, library):
        profile = library.profile("incrypto")
        card = Card(profile, 5)
        card.execute(cmd("0022F403"))
        fresh = Card(profile, 5)  # physical replacement
        assert fresh.state.destroyed is False
        assert fresh.execute(cmd("0022F30300")).sw == SW.OK


class TestInfineon:
    FIVE_STEPS = [
        "00A40000FF",
        "00A40400023F01FF",
        "002241B60383014400",
        "0020008108313233343536373800",
        None,  # signing payload built below
    ]

    def steps(self):
        rows = list(self.FIVE_STEPS)
        rows[4] = "002A9E9A75" + PAYLOAD_VEC.hex().upper() + "FF"
        return rows

    def test_five_step_run(self, library):
        card = Card(library.profile("infineon"), 2)
        responses = run_rows(card, self.steps())
        assert all(r.sw == SW.OK for r in responses)
        assert len(responses[-1].data) == 128

    def test_challenge_pair_anywhere(self, library):
        steps = self.steps()
        for k in range(len(steps) + 1):
            card = Card(library.profile("infineon"), 2)
            rows = steps[:k] + ["0084000008", None] + steps[k:]
            responses = []
            last = b"\x00" * 8
            for row in rows:
                if row is None:
                    command = CommandApdu(0x80, 0x86, 0x00, 0x00, last, 0x00)
                else:
                    command = cmd(row)
                response = card.execute(command)
                if response.is_success and command.ins == 0x84:
                    last = response.data
                responses.append(response)
            assert all(r.sw == SW.OK for r in responses), f"insert at {k}"


class TestPin:
    def test_wrong_pin_then_right(self, library):
        card = Card(library.profile("incrypto"), 1)
        wrong = "0C20009A08" + "00" * 8 + "00"
        assert card.execute(cmd(wrong)).sw == SW.PIN_FAILED
        assert card.state.pin_verified is False
        right = "0C20009A08" + PIN_VEC.hex() + "00"
        assert card.execute(cmd(right)).sw == SW.OK
        assert card.state.pin_verified is True

    def test_three_strikes_blocks(self, library):
        card = Card(library.profile("incrypto"), 1)
        wrong = cmd("0C20009A08" + "00" * 8 + "00")
        for _ in range(3):
            assert card.execute(wrong).sw == SW.PIN_FAILED
        assert card.execute(wrong).sw == SW.PIN_BLOCKED
        right = cmd("0C20009A08" + PIN_VEC.hex() + "00")
        assert card.execute(right).sw == SW.PIN_BLOCKED


class TestGiveChallenge:
    def test_without_pending_challenge(self, library):
        card = Card(library.profile("incrypto"), 1)
        give = CommandApdu(0x80, 0x86, 0x00, 0x00, bytes(8), 0x00)
        assert card.execute(give).sw == SW.OK

    def test_echo_value_not_checked(self, library):
        card = Card(library.profile("incrypto"), 1)
        card.execute(cmd("0084000008"))
        give = CommandApdu(0x80, 0x86, 0x00, 0x00, bytes(range(8)), 0x00)
        assert card.execute(give).sw == SW.OK
        assert card.state.last_challenge is None

    def test_ac45_variant_consumes_challenge(self, library):
        card = Card(library.profile("incrypto"), 1)
        card.execute(cmd("0084BD1708"))
        assert card.state.last_challenge is not None
        give = CommandApdu(0x80, 0x86, 0xAC, 0x45, bytes(8), 0x00)
        assert card.execute(give).sw == SW.OK
        assert card.state.last_challenge is None


class TestDummySignature:
    def test_deterministic_and_128_bytes(self):
        a = dummy_signature("incrypto", b"abc")
        assert len(a) == 128
        assert a == dummy_signature("incrypto", b"abc")

    def test_keyed_by_profile_and_data(self):
        base = dummy_signature("incrypto", b"abc")
        assert base != dummy_signature("infineon", b"abc")
        assert base != dummy_signature("incrypto", b"abd")


class TestLoadProfile:
    def test_builtin_incrypto_rule_count(self, library):
        profile = library.profile("incrypto")
        assert profile.rules[-1].effect == "reject"  # appended catch-all
        assert len(profile.rules) == 15
        assert profile.pin == PIN_VEC
        assert profile.initial_files == {"MF", "1400"}

    def test_empty_document_answers_unsupported(self):
        profile = load_profile("[profile]\nid = void\n")
        card = Card(profile, 0)
        for row in table1_wire_rows():
            assert card.execute(cmd(row)).sw == SW.INS_NOT_SUPPORTED

    def test_unknown_effect(self):
        text = "[profile]\nid = x\n[rule]\nmatch = * * * *\neffect = explode\n"
        with pytest.raises(UnknownEffectError):
            load_profile(text)

    def test_unknown_predicate(self):
        text = "[profile]\nid = x\n[rule]\nmatch = * * * *\nrequire = lucky\neffect = noop\n"
        with pytest.raises(ProfileError):
            load_profile(text)

    def test_bad_match(self):
        text = "[profile]\nid = x\n[rule]\nmatch = 00 A4\neffect = noop\n"
        with pytest.raises(ProfileError):
            load_profile(text)

    def test_shadowed_rule_warns(self, caplog):
        text = (
            "[profile]\nid = x\n"
            "[rule]\nmatch = * 86 * *\neffect = noop\n"
            "[rule]\nmatch = 80 86 00 00 lc=08\neffect = give_challenge\n"
        )
        with caplog.at_level(logging.WARNING, logger="cps.card"):
            load_profile(text)
        assert any("shadowed" in record.message for record in caplog.records)

    def test_intended_overlap_does_not_warn(self, caplog):
        # Specific rule first, broader tolerance later: not dead code.
        text = (
            "[profile]\nid = x\n"
            "[rule]\nmatch = 80 86 00 00 lc=08\neffect = give_challenge\n"
            "[rule]\nmatch = 80 86 * * lc=02|08\neffect = noop\n"
        )
        with caplog.at_level(logging.WARNING, logger="cps.card"):
            load_profile(text)
        assert not caplog.records

import pytest

from cps.documents import DocumentError, parse_document


def test_sections_and_fields():
    text = """
    # leading comment
    [profile]
    id = demo
    pin = 31 32

    [rule]
    match = 00 A4 00 00
    effect = select_mf

    [rule]
    match = * * * *
    effect = noop
    """
    sections = parse_document(text)
    assert [s.name for s in sections] == ["profile", "rule", "rule"]
    assert sections[0].fields == {"id": "demo", "pin": "31 32"}
    assert sections[1].get("match") == "00 A4 00 00"


def test_value_may_contain_equals():
    sections = parse_document("[a]\nkey = x=y")
    assert sections[0].fields["key"] == "x=y"


def test_key_before_section():
    with pytest.raises(DocumentError, match="line 1"):
        parse_document("key = value")


def test_bare_word_rejected():
    with pytest.raises(DocumentError, match="key = value"):
        parse_document("[a]\njunk")


def test_duplicate_key_rejected():
    with pytest.raises(DocumentError, match="duplicate"):
        parse_document("[a]\nk = 1\nk = 2")


def test_require_missing_key():
    sections = parse_document("[a]\nk = 1")
    with pytest.raises(DocumentError, match="missing key"):
        sections[0].require("absent")

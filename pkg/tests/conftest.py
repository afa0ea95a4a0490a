import pytest

from cps.library import Library


@pytest.fixture(scope="session")
def library():
    return Library.with_builtins()


# Fixed substitution vectors for rows whose data field is a placeholder.
RN_VEC = bytes(range(0xA0, 0xA8))
PIN_VEC = bytes.fromhex("3132333435363738")
PAYLOAD_VEC = bytes((i * 7 + 3) % 256 for i in range(117))

_RN = RN_VEC.hex().upper()
_PIN = PIN_VEC.hex().upper()
_PAYLOAD = PAYLOAD_VEC.hex().upper()


def table1_wire_rows():
    """The ten certified commands in wire coding (lc omitted when zero)."""
    return [
        "00A40000FF",
        "00A40000021400FF",
        "0022F30300",
        "0022F1B60383011000",
        "0084000008",
        f"8086000008{_RN}00",
        f"0C20009A08{_PIN}00",
        "0084000008",
        f"8086000008{_RN}00",
        f"0C2A9E9A75{_PAYLOAD}FF",
    ]


def table2_wire_rows():
    """The sixteen-command executed merge in wire coding."""
    return [
        "00A40000FF",
        "8186000002140000",
        "8F86000002140000",
        f"8086AC4508{_RN}00",
        "00A40000021400FF",
        "8186000002140000",
        "0022F30300",
        "0022F1B60383011000",
        "0084BD1708",
        f"8086AC4508{_RN}00",
        f"0C20009A08{_PIN}00",
        "8C86000002140000",
        "0084BD1708",
        f"8086AC4508{_RN}00",
        f"0C2A9E9A75{_PAYLOAD}FF",
        "8C86000002140000",
    ]

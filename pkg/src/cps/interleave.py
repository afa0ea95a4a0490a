"""Interleaving enumeration, uniform sampling, and command mutation.

An interleaving of two sequences is any merge preserving both internal
orders; there are C(l+k, l) of them.  Enumeration streams the merges in
lexicographic choice order (taking from the first sequence sorts first)
without materializing the set, which matters because the space explodes:
two ten-step sequences admit 184756 merges before input values are even
considered.
"""

from __future__ import annotations

import math
import random
from collections.abc import Iterator, Mapping, Sequence
from typing import Any

from .apdu import CommandApdu


class InvalidOverrideError(ValueError):
    """Mutation override that cannot produce a valid command."""


def count_interleavings(l: int, k: int) -> int:
    """C(l+k, l) as an exact integer (arbitrary precision)."""
    if l < 0 or k < 0:
        raise ValueError("sequence lengths must be non-negative")
    return math.comb(l + k, l)


def enumerate_interleavings(a: Sequence, b: Sequence) -> Iterator[list]:
    """Stream every order-preserving merge of ``a`` and ``b``.

    Yields exactly count_interleavings(len(a), len(b)) lists, each of
    length len(a) + len(b), without duplicates, a-first lexicographic.
    """
    a = list(a)
    b = list(b)

    def rec(i: int, j: int, acc: list) -> Iterator[list]:
        if i == len(a) and j == len(b):
            yield list(acc)
            return
        if i < len(a):
            acc.append(a[i])
            yield from rec(i + 1, j, acc)
            acc.pop()
        if j < len(b):
            acc.append(b[j])
            yield from rec(i, j + 1, acc)
            acc.pop()

    return rec(0, 0, [])


def sample_interleavings(a: Sequence, b: Sequence, n: int, seed: int) -> Iterator[list]:
    """Draw ``n`` merges uniformly at random (with replacement).

    Deterministic under ``seed``; yields lazily so large draws stay cheap.
    Uniformity comes from sampling which merged slots take items of ``a``.
    """
    if n < 0:
        raise ValueError("sample count must be non-negative")
    a = list(a)
    b = list(b)
    total = len(a) + len(b)
    rng = random.Random(seed)
    slots = range(total)
    for _ in range(n):
        take_a = frozenset(rng.sample(slots, len(a)))
        merged = []
        ia = ib = 0
        for pos in range(total):
            if pos in take_a:
                merged.append(a[ia])
                ia += 1
            else:
                merged.append(b[ib])
                ib += 1
        yield merged


def brute_force_cost(l: int, k: int, input_bits: int) -> int:
    """C(l+k, l) * 2**(2*input_bits), exactly."""
    if input_bits < 0:
        raise ValueError("input_bits must be non-negative")
    return count_interleavings(l, k) * (1 << (2 * input_bits))


_BYTE_FIELDS = ("cla", "ins", "p1", "p2")
_ALL_FIELDS = _BYTE_FIELDS + ("lc", "data", "le")


def mutate_apdu(cmd: CommandApdu, spec: Mapping[str, Any]) -> CommandApdu:
    """Return ``cmd`` with concrete field overrides applied.

    Accepted keys: cla/ins/p1/p2 (byte), data (bytes), le (byte or None to
    drop it), lc (must agree with the resulting data length).  An empty
    spec is the identity.
    """
    for key in spec:
        if key not in _ALL_FIELDS:
            raise InvalidOverrideError(f"unknown field {key!r}")
    fields = {name: getattr(cmd, name) for name in _BYTE_FIELDS}
    data = cmd.data
    le = cmd.le
    for name in _BYTE_FIELDS:
        if name in spec:
            value = spec[name]
            if not isinstance(value, int) or not 0 <= value <= 0xFF:
                raise InvalidOverrideError(f"{name} must be a byte, got {value!r}")
            fields[name] = value
    if "data" in spec:
        value = spec["data"]
        if not isinstance(value, (bytes, bytearray)):
            raise InvalidOverrideError(f"data must be bytes, got {type(value).__name__}")
        if len(value) > 0xFF:
            raise InvalidOverrideError(f"data too long for single-byte lc: {len(value)}")
        data = bytes(value)
    if "lc" in spec and spec["lc"] != len(data):
        raise InvalidOverrideError(
            f"lc={spec['lc']!r} disagrees with data length {len(data)}"
        )
    if "le" in spec:
        value = spec["le"]
        if value is not None and (not isinstance(value, int) or not 0 <= value <= 0xFF):
            raise InvalidOverrideError(f"le must be a byte or None, got {value!r}")
        le = value
    return CommandApdu(fields["cla"], fields["ins"], fields["p1"], fields["p2"], data, le)


def mutation_variants(cmd: CommandApdu, spec: Mapping[str, Any]) -> Iterator[CommandApdu]:
    """Stream every combination of the given overrides.

    A value that is a range/list/tuple enumerates; scalars apply to every
    variant.  ``data`` is treated as a scalar when given as bytes and as an
    enumeration when given as a list/tuple of byte strings.
    """
    scalar: dict[str, Any] = {}
    sweeps: list[tuple[str, list]] = []
    for key, value in spec.items():
        if key not in _ALL_FIELDS:
            raise InvalidOverrideError(f"unknown field {key!r}")
        if key == "data" and isinstance(value, (bytes, bytearray)):
            scalar[key] = value
        elif isinstance(value, (range, list, tuple)):
            sweeps.append((key, list(value)))
        else:
            scalar[key] = value

    def rec(index: int, acc: dict) -> Iterator[CommandApdu]:
        if index == len(sweeps):
            yield mutate_apdu(cmd, {**scalar, **acc})
            return
        key, values = sweeps[index]
        for value in values:
            acc[key] = value
            yield from rec(index + 1, acc)
        acc.pop(key, None)

    return rec(0, {})

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quicfl.codecs import bitpack
from quicfl.errors import DomainError


def test_layout_examples():
    assert bitpack.pack([1, 0, 1, 1, 0, 0, 0, 0], 1) == b"\x0d"
    assert bitpack.pack([7, 0, 5], 3) == bytes([0x47, 0x01])


@pytest.mark.parametrize("b", range(1, 9))
def test_roundtrip_million(b):
    msgs = np.random.default_rng(b).integers(0, 1 << b, size=10**6)
    data = bitpack.pack(msgs, b)
    assert len(data) == -(-10**6 * b // 8) == bitpack.packed_size(10**6, b)
    np.testing.assert_array_equal(bitpack.unpack(data, 10**6, b), msgs)


@given(st.integers(1, 8).flatmap(lambda b: st.tuples(st.just(b), st.lists(st.integers(0, (1 << b) - 1), max_size=70))))
def test_roundtrip_and_bit_positions(case):
    b, msgs = case
    data = bitpack.pack(msgs, b)
    assert len(data) == (len(msgs) * b + 7) // 8
    bits = np.unpackbits(np.frombuffer(data, np.uint8), bitorder="little")
    for i, v in enumerate(msgs):
        assert sum(int(bits[i * b + k]) << k for k in range(b)) == v
    np.testing.assert_array_equal(bitpack.unpack(data, len(msgs), b), msgs)


def test_errors():
    with pytest.raises(DomainError):
        bitpack.pack([2], 1)
    with pytest.raises(DomainError):
        bitpack.pack([-1], 2)
    with pytest.raises(DomainError):
        bitpack.pack([0], 9)
    with pytest.raises(DomainError):
        bitpack.unpack(b"\x00", 9, 1)

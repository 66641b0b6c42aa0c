import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qkvcomm.bitpack import PackedTensor, pack, pack_tensor, packed_size, unpack, unpack_tensor
from qkvcomm.errors import CodeOutOfRange, LengthMismatch
from qkvcomm.quantizer import quantize


def reference_pack(codes, bits):
    """Bit-at-a-time LSB-first packer used as the oracle."""
    out = bytearray((len(codes) * bits + 7) // 8)
    pos = 0
    for c in codes:
        for i in range(bits):
            if (c >> i) & 1:
                out[pos // 8] |= 1 << (pos % 8)
            pos += 1
    return bytes(out)


def test_four_bit_golden():
    assert pack([0x3, 0xA], 4) == bytes([0xA3])
    assert unpack(bytes([0xA3]), 4, 2).tolist() == [0x3, 0xA]


def test_six_bit_golden():
    assert pack([1, 2, 3, 4], 6) == bytes([0x81, 0x30, 0x10])
    assert reference_pack([1, 2, 3, 4], 6) == bytes([0x81, 0x30, 0x10])


def test_eight_bit_identity():
    codes = [0, 1, 127, 255, 42]
    assert pack(codes, 8) == bytes(codes)


def test_small_roundtrip_and_empty():
    assert unpack(pack([5, 6, 7], 3), 3, 3).tolist() == [5, 6, 7]
    assert pack([], 5) == b""
    assert unpack(b"", 5, 0).tolist() == []


def test_errors():
    with pytest.raises(CodeOutOfRange):
        pack([16], 4)
    with pytest.raises(LengthMismatch):
        unpack(b"\x00", 4, 3)


@settings(max_examples=400, deadline=None)
@given(st.integers(2, 8).flatmap(
    lambda b: st.tuples(st.just(b), st.lists(st.integers(0, 2 ** b - 1), max_size=1024))))
def test_matches_reference_and_roundtrips(case):
    bits, codes = case
    data = pack(codes, bits)
    assert data == reference_pack(codes, bits)
    assert len(data) == packed_size(len(codes), bits)
    assert unpack(data, bits, len(codes)).tolist() == codes


@pytest.mark.parametrize("n", range(0, 33))
def test_size_laws(n):
    assert packed_size(n, 4) == (n + 1) // 2
    assert packed_size(n, 6) == -(-3 * n // 4)
    if n % 4 == 0:
        assert packed_size(n, 6) == 3 * n // 4


def test_padding_is_zero(rng):
    for bits in range(2, 9):
        for n in range(1, 20):
            data = pack(np.full(n, 2 ** bits - 1), bits)
            used = n * bits
            if used % 8:
                assert data[-1] >> (used % 8) == 0


def test_packed_tensor_roundtrip(rng):
    x = rng.normal(size=(1, 2, 3, 5)).astype(np.float32)
    q = quantize(x, 5)
    p = pack_tensor(q)
    assert isinstance(p, PackedTensor) and p.count == 30 and len(p.data) == 19
    back = unpack_tensor(p)
    np.testing.assert_array_equal(back.codes, q.codes)
    assert back.params == q.params and back.shape == q.shape

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hps.core import (
    BadMagicError,
    DecodeError,
    DimensionError,
    DType,
    DuplicateKeyError,
    EncodeError,
    InvariantError,
    SaturationError,
    TableMeta,
    TrailingBytesError,
    TruncatedError,
    UnsupportedVersionError,
    UpdateBatch,
    coerce_vector,
    compress_f16,
    decode_update_batch,
    decompress_f16,
    encode_update_batch,
    key_hash,
    key_hash_array,
)

from conftest import fnv1a64_reference, ref_key_hash

# frozen from the reference oracle in conftest
V0 = 0xA8C7F832281A39C5
V1 = 0x89CD31291D2AEFA4
V2 = 0xE6BD86443DF8CE07


def test_reference_oracle_matches_published_vectors():
    assert fnv1a64_reference(b"") == 0xCBF29CE484222325
    assert fnv1a64_reference(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64_reference(b"foobar") == 0x85944171F73967E8


def test_key_hash_golden():
    assert ref_key_hash(0) == V0
    assert key_hash(0) == V0
    assert key_hash(1) == V1
    assert key_hash(2) == V2
    assert key_hash(1) != key_hash(2)


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_key_hash_matches_reference(k):
    assert key_hash(k) == ref_key_hash(k)


def test_key_hash_array_matches_scalar():
    keys = np.random.default_rng(3).integers(0, 2**64, 2000, dtype=np.uint64)
    expected = np.array([ref_key_hash(int(k)) for k in keys], dtype=np.uint64)
    assert np.array_equal(key_hash_array(keys), expected)


def _batch(n=1, dim=4, dtype=DType.F32, seq=1, table="ads", seed=0):
    rng = np.random.default_rng(seed)
    meta = TableMeta(table, dim, dtype)
    return UpdateBatch.build(meta, seq, [(int(k), rng.uniform(-1, 1, dim)) for k in range(n)])


def test_encode_sizes():
    assert len(encode_update_batch(_batch(0))) == 25
    assert len(encode_update_batch(_batch(1))) == 49
    assert len(encode_update_batch(_batch(1, dtype=DType.F16))) == 25 + 8 + 8


def test_encode_golden_bytes():
    b = UpdateBatch.build(TableMeta("ads", 1), 1, [(7, [1.0])])
    assert encode_update_batch(b).hex() == (
        "48505355" "01" "0300" "616473" "0100000000000000" "01000000" "0100" "00"
        "0700000000000000" "0000803f"
    )


def test_encode_rejects_long_name_and_mixed_dims():
    with pytest.raises(EncodeError):
        encode_update_batch(UpdateBatch("x" * 256, 1, 1, DType.F32, []))
    bad = UpdateBatch("ads", 1, 2, DType.F32, [(1, np.zeros(2, "<f4")), (2, np.zeros(3, "<f4"))])
    with pytest.raises(InvariantError):
        encode_update_batch(bad)


batches = st.builds(
    lambda n, dim, f16, seq, name, seed: _batch(n, dim, DType.F16 if f16 else DType.F32, seq, name, seed),
    st.integers(0, 20),
    st.integers(1, 64),
    st.booleans(),
    st.integers(0, 2**64 - 1),
    st.text(min_size=1, max_size=30).filter(lambda s: len(s.encode()) <= 255),
    st.integers(0, 1000),
)


@settings(max_examples=200)
@given(batches)
def test_round_trip(batch):
    assert decode_update_batch(encode_update_batch(batch)) == batch


def test_decode_errors():
    raw = bytearray(encode_update_batch(_batch(2)))
    flipped = bytearray(raw)
    flipped[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        decode_update_batch(bytes(flipped))
    with pytest.raises(TruncatedError):
        decode_update_batch(bytes(raw[:-1]))
    with pytest.raises(TrailingBytesError):
        decode_update_batch(bytes(raw) + b"\0")
    v2 = bytearray(raw)
    v2[4] = 2
    with pytest.raises(UnsupportedVersionError):
        decode_update_batch(bytes(v2))
    dup = bytearray(raw)
    # second entry's key <- first entry's key
    first = 25
    second = first + 8 + 16
    dup[second : second + 8] = dup[first : first + 8]
    with pytest.raises(DuplicateKeyError):
        decode_update_batch(bytes(dup))
    for n in range(len(raw)):
        with pytest.raises(DecodeError):
            decode_update_batch(bytes(raw[:n]))


def test_f16_exact_values():
    x = np.array([0.0, 1.0, -1.0, 0.5, -0.5], dtype=np.float32)
    assert np.array_equal(decompress_f16(compress_f16(x)), x)


def test_f16_one_third_bound():
    x = np.float32(1 / 3)
    rt = decompress_f16(compress_f16([x]))[0]
    assert abs(float(x) - float(rt)) <= 2**-11
    # agrees with numpy's reference float16 conversion
    assert rt == np.float32(np.float16(x))


def test_f16_saturation():
    with pytest.raises(SaturationError):
        compress_f16([1e6])
    assert decompress_f16(compress_f16([65504.0]))[0] == 65504.0
    with pytest.raises(InvariantError):
        compress_f16([float("nan")])


@given(st.floats(min_value=-1, max_value=1, width=32))
def test_f16_bound_property(x):
    rt = decompress_f16(compress_f16([x]))[0]
    assert abs(x - float(rt)) <= 2**-11


def test_f16_rounds_to_nearest_even():
    # 1 + 2^-11 is exactly halfway between 1 and 1 + 2^-10; ties go to the even mantissa
    assert decompress_f16(compress_f16([1 + 2**-11]))[0] == 1.0
    assert decompress_f16(compress_f16([1 + 3 * 2**-11]))[0] == 1 + 2**-9


def test_coerce_vector():
    v = coerce_vector([1, 2, 3], 3, DType.F32)
    assert v.dtype == np.dtype("<f4") and not v.flags.writeable
    with pytest.raises(DimensionError):
        coerce_vector([1, 2], 3, DType.F32)
    with pytest.raises(InvariantError):
        coerce_vector([1, np.inf, 3], 3, DType.F32)
    assert coerce_vector([0.5, 1, 2], 3, DType.F16).dtype == np.dtype("<f2")


def test_table_meta_defaults_and_limits():
    m = TableMeta("t", 3)
    assert np.array_equal(m.default_vector, np.zeros(3, np.float32))
    with pytest.raises(InvariantError):
        TableMeta("", 3)
    with pytest.raises(InvariantError):
        TableMeta("t", 0)
    with pytest.raises(InvariantError):
        TableMeta("t", 4097)


def test_build_rejects_duplicate_keys(meta):
    with pytest.raises(InvariantError):
        UpdateBatch.build(meta, 1, [(1, np.zeros(4)), (1, np.ones(4))])


def test_layout_is_little_endian():
    raw = encode_update_batch(_batch(1, seq=0x0102030405060708))
    assert raw[10:18] == struct.pack("<Q", 0x0102030405060708)

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from circuitscope.trace import (
    HEADER_SIZE,
    NO_HEAD,
    RECORD_OVERHEAD,
    BadMagicError,
    ChecksumError,
    IndexMismatchError,
    TraceRecord,
    TruncatedTraceError,
    UnsupportedVersionError,
    decode_trace,
    encode_trace,
    query,
    read_trace,
    write_trace,
)

ANALYSIS_TIMESTEPS = (100, 300, 600, 900)


def random_records(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        rank = int(rng.integers(1, 5))
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rank))
        out.append(
            TraceRecord(
                name=f"layer{i % 7}",
                kind=("activation", "attention", "image", "scalar")[i % 4],
                timestep=int(rng.integers(0, 1000)),
                payload=rng.standard_normal(shape).astype(np.float32),
                head=int(rng.integers(0, 8)) if i % 3 == 0 else NO_HEAD,
                batch_index=int(rng.integers(0, 100)),
            )
        )
    return out


def attention_record(head, t=100, batch=0):
    A = np.random.default_rng(head + t).random((4, 4)).astype(np.float32)
    return TraceRecord("middle.attn", "attention", t, A / A.sum(-1, keepdims=True), head=head, batch_index=batch)


def test_empty_trace_is_valid(tmp_path):
    n = write_trace([], tmp_path / "e.dtrc")
    assert n == HEADER_SIZE + 4
    assert len(read_trace(tmp_path / "e.dtrc")) == 0


def test_size_arithmetic_for_one_activation(tmp_path):
    rec = TraceRecord("mid", "activation", 3, np.ones((2, 2)))
    n = write_trace([rec], tmp_path / "one.dtrc")
    index = 4 + 8
    record = RECORD_OVERHEAD + len("mid") + 4 * 2 + 16
    assert HEADER_SIZE == 60 and RECORD_OVERHEAD == 20
    assert n == HEADER_SIZE + index + record == (tmp_path / "one.dtrc").stat().st_size


def test_header_fields(tmp_path):
    digest = bytes(range(32))
    write_trace(random_records(3), tmp_path / "h.dtrc", seed=77, config_digest=digest)
    raw = (tmp_path / "h.dtrc").read_bytes()
    magic, version, endian, _, seed, dig, index_off, count = struct.unpack_from("<4sHBBQ32sQI", raw)
    assert (magic, version, endian, seed, dig, count) == (b"DTRC", 1, 1, 77, digest, 3)
    (idx_count,) = struct.unpack_from("<I", raw, index_off)
    offsets = struct.unpack_from("<3Q", raw, index_off + 4)
    assert idx_count == 3 and offsets[0] == HEADER_SIZE and list(offsets) == sorted(set(offsets))
    tf = read_trace(tmp_path / "h.dtrc")
    assert tf.seed == 77 and tf.config_digest == digest


def test_write_is_deterministic(tmp_path):
    recs = random_records(20)
    write_trace(recs, tmp_path / "a.dtrc")
    write_trace(recs, tmp_path / "b.dtrc")
    assert (tmp_path / "a.dtrc").read_bytes() == (tmp_path / "b.dtrc").read_bytes()


def test_round_trip_thousand_records(tmp_path):
    recs = random_records(1000, seed=1)
    write_trace(recs, tmp_path / "big.dtrc")
    assert read_trace(tmp_path / "big.dtrc").records == recs


@given(
    st.lists(
        st.tuples(
            arrays(
                np.float32,
                st.lists(st.integers(1, 64), min_size=1, max_size=4).filter(lambda s: np.prod(s) <= 4096).map(tuple),
                elements=st.floats(width=32, allow_nan=False),
            ),
            st.text(min_size=1, max_size=12),
            st.integers(0, 2**32 - 1),
            st.integers(0, 0xFFFF),
        ),
        max_size=5,
    )
)
@settings(max_examples=60, deadline=None)
def test_round_trip_property(items):
    recs = [TraceRecord(name, "activation", t, arr, head=h) for arr, name, t, h in items]
    assert decode_trace(encode_trace(recs, seed=5)).records == recs


def test_bad_magic():
    blob = bytearray(encode_trace(random_records(2)))
    blob[:4] = b"NOPE"
    with pytest.raises(BadMagicError):
        decode_trace(bytes(blob))


def test_unsupported_version_names_both():
    blob = bytearray(encode_trace(random_records(2)))
    blob[4:6] = (2).to_bytes(2, "little")
    with pytest.raises(UnsupportedVersionError) as err:
        decode_trace(bytes(blob))
    assert "2" in str(err.value) and "1" in str(err.value)


def test_truncation_mid_payload():
    blob = encode_trace(random_records(5))
    # drop the index and half of the last record
    with pytest.raises(TruncatedTraceError):
        decode_trace(blob[: HEADER_SIZE + (len(blob) - HEADER_SIZE) // 2])


def test_index_mismatch():
    recs = random_records(3)
    blob = bytearray(encode_trace(recs))
    (index_off,) = struct.unpack_from("<Q", blob, 48)
    struct.pack_into("<Q", blob, index_off + 4 + 8, HEADER_SIZE + 1)
    with pytest.raises(IndexMismatchError):
        decode_trace(bytes(blob))


def test_every_payload_byte_flip_detected():
    rec = TraceRecord("x", "activation", 0, np.arange(6, dtype=np.float32))
    blob = encode_trace([rec])
    payload_start = HEADER_SIZE + RECORD_OVERHEAD - 4 + 1 + 4
    for pos in range(payload_start, payload_start + 24):
        corrupted = bytearray(blob)
        corrupted[pos] ^= 0x01
        with pytest.raises(ChecksumError):
            decode_trace(bytes(corrupted))


def test_attention_rows_survive_round_trip(tmp_path):
    write_trace([attention_record(h) for h in range(8)], tmp_path / "a.dtrc")
    for r in read_trace(tmp_path / "a.dtrc"):
        np.testing.assert_allclose(r.payload.sum(-1), 1.0, atol=1e-5)


def test_query_filters():
    recs = [attention_record(h, t) for t in (100, 200, 300, 600, 900, 950) for h in range(8)]
    recs += [TraceRecord("middle", "activation", 100, np.zeros(3))]
    assert query(recs, name="nothing") == []
    at_analysis = query(recs, timestep=ANALYSIS_TIMESTEPS)
    assert {r.timestep for r in at_analysis} == set(ANALYSIS_TIMESTEPS)
    assert at_analysis == [r for r in recs if r.timestep in ANALYSIS_TIMESTEPS]
    attention = query(recs, kind="attention")
    union = [r for r in attention if any(r in query(attention, head=h) for h in range(8))]
    assert union == attention
    assert sum(len(query(attention, head=h)) for h in range(8)) == len(attention)


def test_record_validation():
    with pytest.raises(ValueError):
        TraceRecord("x", "bogus", 0, np.zeros(1))

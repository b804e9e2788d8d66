"""Binary trace format: round-trips, validation, and malformed inputs."""

import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heterocache.trace import (
    MAGIC,
    PAD_INDEX,
    AttentionTrace,
    BadMagicError,
    TraceFormatError,
    TraceInvariantError,
    TraceManifest,
    TruncatedPayloadError,
    UnsupportedVersionError,
    make_trace,
    read_trace,
    validate_trace,
    write_trace,
)


def tiny_manifest(**overrides):
    base = dict(
        model_name="m",
        num_layers=1,
        heads_per_layer=2,
        prefill_len=16,
        decode_steps=2,
        trace_topk=4,
    )
    base.update(overrides)
    return TraceManifest(**base)


def tiny_trace():
    m = tiny_manifest()
    shape = (m.decode_steps + 1, m.num_layers, m.heads_per_layer, m.trace_topk)
    indices = np.zeros(shape, dtype=np.uint32)
    scores = np.zeros(shape, dtype=np.float32)
    for s in range(shape[0]):
        for h in range(m.heads_per_layer):
            indices[s, 0, h] = [h, h + 2, h + 4, h + 6]
            scores[s, 0, h] = [0.4, 0.3, 0.2, 0.1]
    return make_trace(m, indices, scores)


def test_minimal_example_round_trip(tmp_path):
    # Hand-built two-head trace survives a file round trip bit-exactly.
    trace = tiny_trace()
    path = tmp_path / "t.hctr"
    n = write_trace(trace, path)
    assert n == path.stat().st_size
    back = read_trace(path)
    assert back.manifest == trace.manifest
    assert np.array_equal(back.indices, trace.indices)
    assert np.array_equal(back.scores, trace.scores)
    assert trace.structurally_equal(back)


def test_write_read_bytes_and_stream():
    trace = tiny_trace()
    buf = io.BytesIO()
    write_trace(trace, buf)
    raw = buf.getvalue()
    assert raw.startswith(MAGIC)
    assert trace.structurally_equal(read_trace(raw))
    assert trace.structurally_equal(read_trace(io.BytesIO(raw)))


def test_rewrite_is_byte_identical(tmp_path):
    trace = tiny_trace()
    a, b = tmp_path / "a.hctr", tmp_path / "b.hctr"
    write_trace(trace, a)
    write_trace(read_trace(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_manifest_exact_keys():
    d = tiny_manifest().to_json_dict()
    assert set(d) == {
        "model_name",
        "num_layers",
        "heads_per_layer",
        "prefill_len",
        "decode_steps",
        "trace_topk",
        "pool_kernel_used",
        "bytes_per_kv_entry",
    }
    with pytest.raises(TraceFormatError):
        TraceManifest.from_json_dict({**d, "extra": 1})
    missing = dict(d)
    del missing["trace_topk"]
    with pytest.raises(TraceFormatError):
        TraceManifest.from_json_dict(missing)


def test_bad_magic_distinguished():
    raw = bytearray(io_bytes(tiny_trace()))
    raw[:8] = b"NOTMAGIC"
    with pytest.raises(BadMagicError):
        read_trace(bytes(raw))


def test_unsupported_version_distinguished():
    raw = bytearray(io_bytes(tiny_trace()))
    raw[:8] = b"HCTRACE9"
    with pytest.raises(UnsupportedVersionError):
        read_trace(bytes(raw))
    # Version errors are not plain bad-magic errors.
    assert not issubclass(UnsupportedVersionError, BadMagicError)


def test_truncation_reports_byte_offset():
    raw = io_bytes(tiny_trace())
    cut = len(raw) - 5
    with pytest.raises(TruncatedPayloadError) as exc:
        read_trace(raw[:cut])
    assert exc.value.byte_offset == cut
    with pytest.raises(TruncatedPayloadError):
        read_trace(raw[:10])  # inside the manifest length prefix


def test_trailing_garbage_rejected():
    raw = io_bytes(tiny_trace())
    with pytest.raises(TraceFormatError):
        read_trace(raw + b"\x00")


def test_manifest_json_garbage():
    trace = tiny_trace()
    raw = io_bytes(trace)
    (mlen,) = struct.unpack("<I", raw[8:12])
    broken = raw[:12] + b"{" * mlen + raw[12 + mlen :]
    with pytest.raises(TraceFormatError):
        read_trace(broken)


def io_bytes(trace):
    buf = io.BytesIO()
    write_trace(trace, buf)
    return buf.getvalue()


def test_padding_must_be_suffix():
    trace = tiny_trace()
    indices = trace.indices.copy()
    scores = trace.scores.copy()
    indices[0, 0, 0, 1] = PAD_INDEX  # pad followed by live entry
    scores[0, 0, 0, 1] = 0.0
    with pytest.raises(TraceInvariantError):
        make_trace(trace.manifest, indices, scores)


def test_padding_score_must_be_zero():
    trace = tiny_trace()
    indices = trace.indices.copy()
    scores = trace.scores.copy()
    indices[0, 0, 0, 3] = PAD_INDEX
    scores[0, 0, 0, 3] = 0.5
    with pytest.raises(TraceInvariantError):
        make_trace(trace.manifest, indices, scores)


def test_scores_nonincreasing_enforced():
    trace = tiny_trace()
    scores = trace.scores.copy()
    scores[0, 0, 0] = [0.1, 0.2, 0.3, 0.4]
    with pytest.raises(TraceInvariantError):
        make_trace(trace.manifest, trace.indices, scores)


def test_duplicate_indices_rejected():
    trace = tiny_trace()
    indices = trace.indices.copy()
    indices[0, 0, 0] = [1, 1, 2, 3]
    with pytest.raises(TraceInvariantError):
        make_trace(trace.manifest, indices, trace.scores)


def test_index_bound_is_step_dependent():
    # At decode step t the attended sequence has prefill_len + t positions.
    trace = tiny_trace()
    m = trace.manifest
    indices = trace.indices.copy()
    indices[1, 0, 0] = [m.prefill_len, 2, 4, 6]  # legal only from step 1 on
    indices[1, 0, 0].sort()
    scores = trace.scores.copy()
    scores[1, 0, 0] = [0.4, 0.3, 0.2, 0.1]
    indices[1, 0, 0] = [2, 4, 6, m.prefill_len]
    t2 = make_trace(m, indices, scores)
    validate_trace(t2)

    bad = trace.indices.copy()
    bad[0, 0, 0] = [2, 4, 6, m.prefill_len]  # out of range at prefill
    with pytest.raises(TraceInvariantError):
        make_trace(m, bad, scores)


def test_step_accessor_and_head_entries():
    trace = tiny_trace()
    step = trace.step(1)
    assert step.step_index == 1
    pairs = step.head_entries(0, 1)
    assert [i for i, _ in pairs] == [1, 3, 5, 7]
    assert all(b <= a for a, b in zip([s for _, s in pairs], [s for _, s in pairs][1:]))
    with pytest.raises(IndexError):
        trace.step(trace.num_steps)


@settings(max_examples=25, deadline=None)
@given(
    layers=st.integers(1, 3),
    heads=st.integers(1, 3),
    steps=st.integers(1, 4),
    topk=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_round_trip_property(layers, heads, steps, topk, seed):
    # Arbitrary well-formed traces survive serialization exactly.
    rng = np.random.default_rng(seed)
    L = 32
    m = TraceManifest(
        model_name="prop",
        num_layers=layers,
        heads_per_layer=heads,
        prefill_len=L,
        decode_steps=steps,
        trace_topk=topk,
    )
    shape = (steps + 1, layers, heads, topk)
    indices = np.full(shape, PAD_INDEX, dtype=np.uint32)
    scores = np.zeros(shape, dtype=np.float32)
    for s in range(steps + 1):
        limit = L + max(0, s)
        for l in range(layers):
            for h in range(heads):
                live = int(rng.integers(1, topk + 1))
                live = min(live, limit)
                picks = rng.choice(limit, size=live, replace=False)
                vals = np.sort(rng.random(live).astype(np.float32))[::-1]
                indices[s, l, h, :live] = picks
                scores[s, l, h, :live] = vals
    trace = make_trace(m, indices, scores)
    back = read_trace(io_bytes(trace))
    assert trace.structurally_equal(back)
    assert np.array_equal(trace.indices, back.indices)

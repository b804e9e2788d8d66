"""Attention trace container and its bit-exact on-disk format.

A trace records, for the prefill step and each of T decode steps, the
top-``K_trace`` (token_index, score) pairs per attention head. Records are
fixed-size: heads with fewer than ``K_trace`` live entries are padded with
``(PAD_INDEX, 0.0)`` pairs, which may only appear as a suffix.

File layout (little-endian throughout)::

    magic         8 bytes, ASCII "HCTRACE1"
    manifest_len  unsigned 32-bit
    manifest      UTF-8 JSON, exactly the TraceManifest keys
    body          (T+1) x num_layers x heads_per_layer x K_trace records of
                  (unsigned 32-bit token_index, 32-bit float score),
                  ordered step-major, then layer, then head

Traces are immutable after construction and safe to share across readers.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Union

import numpy as np

MAGIC = b"HCTRACE1"
MAGIC_PREFIX = b"HCTRACE"
PAD_INDEX = 0xFFFFFFFF

_MANIFEST_KEYS = {
    "model_name",
    "num_layers",
    "heads_per_layer",
    "prefill_len",
    "decode_steps",
    "trace_topk",
    "pool_kernel_used",
    "bytes_per_kv_entry",
}

_RECORD_DTYPE = np.dtype([("index", "<u4"), ("score", "<f4")])


class TraceError(Exception):
    """Base class for trace container and format errors."""


class TraceInvariantError(TraceError):
    """A trace violates a structural invariant (in memory or on disk)."""


class TraceFormatError(TraceError):
    """The byte stream is not a well-formed trace file."""


class BadMagicError(TraceFormatError):
    """The stream does not start with the trace magic."""


class UnsupportedVersionError(TraceFormatError):
    """The stream carries a trace format version this reader does not know."""


class TruncatedPayloadError(TraceFormatError):
    """The stream ended before the declared payload was complete."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte offset {byte_offset})")
        self.byte_offset = byte_offset


@dataclass(frozen=True)
class TraceManifest:
    """Dimensions and export-time constants of a trace."""

    model_name: str
    num_layers: int
    heads_per_layer: int
    prefill_len: int
    decode_steps: int
    trace_topk: int
    pool_kernel_used: int = 0
    bytes_per_kv_entry: int = 256

    def validate(self) -> None:
        if self.num_layers < 1:
            raise TraceInvariantError("num_layers must be >= 1")
        if self.heads_per_layer < 1:
            raise TraceInvariantError("heads_per_layer must be >= 1")
        if self.prefill_len < 1:
            raise TraceInvariantError("prefill_len must be >= 1")
        if self.decode_steps < 0:
            raise TraceInvariantError("decode_steps must be >= 0")
        if self.trace_topk < 1:
            raise TraceInvariantError("trace_topk must be >= 1")
        if self.trace_topk > self.prefill_len + self.decode_steps:
            raise TraceInvariantError(
                "trace_topk must not exceed prefill_len + decode_steps"
            )
        if self.pool_kernel_used != 0 and self.pool_kernel_used % 2 == 0:
            raise TraceInvariantError("pool_kernel_used must be odd or 0")
        if self.pool_kernel_used < 0:
            raise TraceInvariantError("pool_kernel_used must be odd or 0")
        if self.bytes_per_kv_entry < 1:
            raise TraceInvariantError("bytes_per_kv_entry must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "num_layers": self.num_layers,
            "heads_per_layer": self.heads_per_layer,
            "prefill_len": self.prefill_len,
            "decode_steps": self.decode_steps,
            "trace_topk": self.trace_topk,
            "pool_kernel_used": self.pool_kernel_used,
            "bytes_per_kv_entry": self.bytes_per_kv_entry,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TraceManifest":
        keys = set(payload)
        if keys != _MANIFEST_KEYS:
            missing = sorted(_MANIFEST_KEYS - keys)
            extra = sorted(keys - _MANIFEST_KEYS)
            raise TraceFormatError(
                f"manifest keys mismatch: missing={missing} extra={extra}"
            )
        if not isinstance(payload["model_name"], str):
            raise TraceFormatError("manifest model_name must be a string")
        int_fields = _MANIFEST_KEYS - {"model_name"}
        for field in int_fields:
            if not isinstance(payload[field], int) or isinstance(payload[field], bool):
                raise TraceFormatError(f"manifest {field} must be an integer")
        return cls(**payload)


@dataclass(frozen=True)
class StepAttention:
    """One step's recorded attention: top-K (index, score) pairs per head.

    ``indices`` and ``scores`` have shape (num_layers, heads_per_layer,
    trace_topk); scores are nonincreasing along the last axis and padding
    pairs (PAD_INDEX, 0.0) form a suffix.
    """

    step_index: int
    indices: np.ndarray
    scores: np.ndarray

    def head_entries(self, layer: int, head: int) -> list[tuple[int, float]]:
        """Live (token_index, score) pairs for one head, score-descending."""
        idx = self.indices[layer, head]
        live = idx != PAD_INDEX
        return list(
            zip(
                (int(i) for i in idx[live]),
                (float(s) for s in self.scores[layer, head][live]),
            )
        )


@dataclass(frozen=True)
class AttentionTrace:
    """A full trace: manifest plus (T+1) step records, prefill first.

    Index and score arrays have shape (T+1, num_layers, heads_per_layer,
    trace_topk) with dtypes uint32 / float32.
    """

    manifest: TraceManifest
    indices: np.ndarray
    scores: np.ndarray

    @property
    def num_steps(self) -> int:
        return self.manifest.decode_steps + 1

    def step(self, step_index: int) -> StepAttention:
        if not 0 <= step_index <= self.manifest.decode_steps:
            raise IndexError(f"step {step_index} out of range")
        return StepAttention(
            step_index=step_index,
            indices=self.indices[step_index],
            scores=self.scores[step_index],
        )

    @property
    def steps(self) -> Iterator[StepAttention]:
        return (self.step(s) for s in range(self.num_steps))

    def head_ids(self) -> list[tuple[int, int]]:
        m = self.manifest
        return [
            (layer, head)
            for layer in range(m.num_layers)
            for head in range(m.heads_per_layer)
        ]

    def validate(self) -> None:
        validate_trace(self)

    def structurally_equal(self, other: "AttentionTrace") -> bool:
        return (
            self.manifest == other.manifest
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.scores, other.scores)
        )


def make_trace(
    manifest: TraceManifest, indices: np.ndarray, scores: np.ndarray
) -> AttentionTrace:
    """Build a trace from arrays, normalizing dtypes and freezing the buffers."""
    expected = (
        manifest.decode_steps + 1,
        manifest.num_layers,
        manifest.heads_per_layer,
        manifest.trace_topk,
    )
    indices = np.ascontiguousarray(indices, dtype=np.uint32)
    scores = np.ascontiguousarray(scores, dtype=np.float32)
    if indices.shape != expected or scores.shape != expected:
        raise TraceInvariantError(
            f"trace arrays must have shape {expected}, "
            f"got {indices.shape} / {scores.shape}"
        )
    indices.setflags(write=False)
    scores.setflags(write=False)
    trace = AttentionTrace(manifest=manifest, indices=indices, scores=scores)
    validate_trace(trace)
    return trace


def validate_trace(trace: AttentionTrace) -> None:
    """Check every trace invariant; raise TraceInvariantError on the first hit."""
    m = trace.manifest
    m.validate()
    expected = (m.decode_steps + 1, m.num_layers, m.heads_per_layer, m.trace_topk)
    if trace.indices.shape != expected or trace.scores.shape != expected:
        raise TraceInvariantError(
            f"trace arrays must have shape {expected}, "
            f"got {trace.indices.shape} / {trace.scores.shape}"
        )

    idx = trace.indices
    sc = trace.scores
    pad = idx == PAD_INDEX

    if np.any(sc < 0.0):
        raise TraceInvariantError("scores must be nonnegative")
    if np.any(sc[pad] != 0.0):
        raise TraceInvariantError("padding pairs must carry score 0.0")
    # Padding must be a suffix: once a pad appears, everything after is pad.
    if m.trace_topk > 1 and np.any(pad[..., :-1] & ~pad[..., 1:]):
        raise TraceInvariantError("padding pairs must form a suffix")
    if m.trace_topk > 1:
        live_next = ~pad[..., 1:]
        if np.any((sc[..., :-1] < sc[..., 1:]) & live_next):
            raise TraceInvariantError("scores must be nonincreasing within a head")

    for s in range(m.decode_steps + 1):
        seq_len = m.prefill_len + s
        step_idx = idx[s]
        step_pad = pad[s]
        if np.any(step_idx[~step_pad] >= seq_len):
            raise TraceInvariantError(
                f"step {s}: token index beyond sequence length {seq_len}"
            )
        for layer in range(m.num_layers):
            for head in range(m.heads_per_layer):
                live = step_idx[layer, head][~step_pad[layer, head]]
                if live.size != np.unique(live).size:
                    raise TraceInvariantError(
                        f"step {s} layer {layer} head {head}: duplicate token index"
                    )


ByteSink = Union[str, Path, BinaryIO]
ByteSource = Union[str, Path, bytes, BinaryIO]


def write_trace(trace: AttentionTrace, destination: ByteSink) -> int:
    """Write a trace in the binary format; returns the byte count written.

    The trace is validated before any bytes are emitted.
    """
    validate_trace(trace)

    manifest_bytes = json.dumps(
        trace.manifest.to_json_dict(), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    body = np.empty(trace.indices.shape, dtype=_RECORD_DTYPE)
    body["index"] = trace.indices
    body["score"] = trace.scores

    payload = b"".join(
        [MAGIC, struct.pack("<I", len(manifest_bytes)), manifest_bytes, body.tobytes()]
    )

    if isinstance(destination, (str, Path)):
        path = Path(destination)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        tmp.replace(path)
    else:
        destination.write(payload)
    return len(payload)


def _read_exact(stream: BinaryIO, n: int, offset: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) < n:
        raise TruncatedPayloadError(f"stream ended while reading {what}", offset + len(data))
    return data


def read_trace(source: ByteSource) -> AttentionTrace:
    """Parse a trace file, validating the format and every invariant.

    Raises BadMagicError, UnsupportedVersionError, TruncatedPayloadError,
    TraceFormatError, or TraceInvariantError, each for its own failure mode.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_trace(fh)
    if isinstance(source, (bytes, bytearray)):
        return read_trace(io.BytesIO(bytes(source)))

    stream = source
    magic = _read_exact(stream, len(MAGIC), 0, "magic")
    if magic[: len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise BadMagicError(f"bad magic {magic!r}")
    if magic != MAGIC:
        raise UnsupportedVersionError(
            f"unsupported trace version {magic[len(MAGIC_PREFIX):]!r}"
        )

    offset = len(MAGIC)
    (manifest_len,) = struct.unpack("<I", _read_exact(stream, 4, offset, "manifest length"))
    offset += 4
    manifest_bytes = _read_exact(stream, manifest_len, offset, "manifest")
    offset += manifest_len
    try:
        manifest_json = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(manifest_json, dict):
        raise TraceFormatError("manifest must be a JSON object")
    manifest = TraceManifest.from_json_dict(manifest_json)
    manifest.validate()

    shape = (
        manifest.decode_steps + 1,
        manifest.num_layers,
        manifest.heads_per_layer,
        manifest.trace_topk,
    )
    body_len = int(np.prod(shape)) * _RECORD_DTYPE.itemsize
    body_bytes = _read_exact(stream, body_len, offset, "step records")
    offset += body_len
    trailing = stream.read(1)
    if trailing:
        raise TraceFormatError("trailing bytes after the final step record")

    records = np.frombuffer(body_bytes, dtype=_RECORD_DTYPE).reshape(shape)
    trace = make_trace(
        manifest,
        records["index"].astype(np.uint32),
        records["score"].astype(np.float32),
    )
    validate_trace(trace)
    return trace


def trace_fingerprint(trace: AttentionTrace) -> str:
    """SHA-256 over the manifest JSON and both data buffers, as hex.

    Reports carry this so that results can only be compared when they were
    produced from the same trace bytes.
    """
    h = hashlib.sha256()
    h.update(json.dumps(trace.manifest.to_json_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(trace.indices).tobytes())
    h.update(np.ascontiguousarray(trace.scores).tobytes())
    return h.hexdigest()

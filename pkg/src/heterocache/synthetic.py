"""Synthetic attention traces with planted head archetypes.

Each head follows one archetype:

* ``StableHead`` — keeps a fixed prefill hot set; a ``noise_rate`` fraction of
  each decode step's set is replaced by transient out-of-set positions.
* ``DecayingHead`` — replaces a ``drift_rate`` fraction of its hot set with
  fresh positions every decode step, oldest members first.
* ``ClusterMember`` — draws at least an ``agreement_rate`` fraction of its set
  from a shared per-cluster trajectory, topped up with a private stable pool.

Cluster trajectories have their own hot-set size and optional per-step drift.
Drift events plant one-shot attention shifts: at a given decode step, affected
heads (or their whole cluster) replace a fraction of their hot set at once.

Scores follow a geometric profile (ratio 0.9) over each step's ordered set,
so top-k extraction downstream is unambiguous and recorded mass is nonzero.
Generation is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .trace import PAD_INDEX, AttentionTrace, TraceManifest, make_trace

SCORE_RATIO = 0.9

HeadId = tuple[int, int]


class SynthSpecError(ValueError):
    """The synthetic spec is inconsistent or out of range."""


@dataclass(frozen=True)
class StableHead:
    hot_size: int
    noise_rate: float = 0.0


@dataclass(frozen=True)
class DecayingHead:
    hot_size: int
    drift_rate: float


@dataclass(frozen=True)
class ClusterMember:
    cluster_id: int
    agreement_rate: float = 1.0


Archetype = Union[StableHead, DecayingHead, ClusterMember]


@dataclass(frozen=True)
class ClusterSpec:
    """Shared trajectory for one cluster of redundant heads."""

    hot_size: int
    drift_rate: float = 0.0


@dataclass(frozen=True)
class DriftEvent:
    """One-shot attention shift: replace a hot-set fraction at a decode step."""

    step: int
    heads: tuple[HeadId, ...]
    replace_fraction: float


@dataclass(frozen=True)
class SynthSpec:
    num_layers: int
    heads_per_layer: int
    prefill_len: int
    decode_steps: int
    trace_topk: int
    archetypes: Mapping[HeadId, Archetype]
    clusters: Mapping[int, ClusterSpec] = field(default_factory=dict)
    drift_events: tuple[DriftEvent, ...] = ()
    seed: int = 0
    model_name: str = "synthetic"
    bytes_per_kv_entry: int = 256

    def manifest(self) -> TraceManifest:
        return TraceManifest(
            model_name=self.model_name,
            num_layers=self.num_layers,
            heads_per_layer=self.heads_per_layer,
            prefill_len=self.prefill_len,
            decode_steps=self.decode_steps,
            trace_topk=self.trace_topk,
            pool_kernel_used=0,
            bytes_per_kv_entry=self.bytes_per_kv_entry,
        )

    def head_ids(self) -> list[HeadId]:
        return [
            (layer, head)
            for layer in range(self.num_layers)
            for head in range(self.heads_per_layer)
        ]

    def _check_headroom(self, what: str, hot_size: int, rate: float) -> None:
        # One replacement draws round(rate * hot) fresh positions from the
        # prefill range; they must fit next to the current hot set.
        needed = hot_size + int(round(rate * hot_size))
        if needed > self.prefill_len:
            raise SynthSpecError(
                f"{what}: replacing {rate:g} of {hot_size} hot positions needs "
                f"{needed} distinct positions but prefill_len is {self.prefill_len}"
            )

    def validate(self) -> None:
        self.manifest().validate()
        heads = set(self.head_ids())
        if set(self.archetypes) != heads:
            raise SynthSpecError("every head needs exactly one archetype")
        for head_id, arch in self.archetypes.items():
            if isinstance(arch, (StableHead, DecayingHead)):
                if not 1 <= arch.hot_size <= min(self.trace_topk, self.prefill_len):
                    raise SynthSpecError(
                        f"head {head_id}: hot_size must be in [1, min(trace_topk, prefill_len)]"
                    )
            rate = (
                arch.noise_rate
                if isinstance(arch, StableHead)
                else arch.drift_rate
                if isinstance(arch, DecayingHead)
                else arch.agreement_rate
            )
            if not 0.0 <= rate <= 1.0:
                raise SynthSpecError(f"head {head_id}: rate must be in [0, 1]")
            if isinstance(arch, (StableHead, DecayingHead)):
                self._check_headroom(f"head {head_id}", arch.hot_size, rate)
            if isinstance(arch, ClusterMember) and arch.cluster_id not in self.clusters:
                raise SynthSpecError(
                    f"head {head_id}: cluster {arch.cluster_id} has no ClusterSpec"
                )
        for cid, cspec in self.clusters.items():
            if not 1 <= cspec.hot_size <= min(self.trace_topk, self.prefill_len):
                raise SynthSpecError(
                    f"cluster {cid}: hot_size must be in [1, min(trace_topk, prefill_len)]"
                )
            if not 0.0 <= cspec.drift_rate <= 1.0:
                raise SynthSpecError(f"cluster {cid}: drift_rate must be in [0, 1]")
            self._check_headroom(f"cluster {cid}", cspec.hot_size, cspec.drift_rate)
            members = self.cluster_members(cid)
            if not members:
                raise SynthSpecError(f"cluster {cid}: no members")
            layers = {layer for layer, _ in members}
            if len(layers) > 1:
                raise SynthSpecError(
                    f"cluster {cid} spans layers {sorted(layers)}; clusters are layer-local"
                )
        for event in self.drift_events:
            if not 1 <= event.step <= self.decode_steps:
                raise SynthSpecError(
                    f"drift event step {event.step} outside decode range"
                )
            if not 0.0 <= event.replace_fraction <= 1.0:
                raise SynthSpecError("drift event replace_fraction must be in [0, 1]")
            for head_id in event.heads:
                if head_id not in heads:
                    raise SynthSpecError(f"drift event targets unknown head {head_id}")
                arch = self.archetypes[head_id]
                hot = (
                    self.clusters[arch.cluster_id].hot_size
                    if isinstance(arch, ClusterMember)
                    else arch.hot_size
                )
                self._check_headroom(
                    f"drift event at step {event.step} on head {head_id}",
                    hot,
                    event.replace_fraction,
                )

    def cluster_members(self, cluster_id: int) -> list[HeadId]:
        return sorted(
            head_id
            for head_id, arch in self.archetypes.items()
            if isinstance(arch, ClusterMember) and arch.cluster_id == cluster_id
        )


@dataclass(frozen=True)
class GroundTruth:
    """Generator-side expected taxonomy, used as an oracle in tests."""

    roles: dict[HeadId, str]
    clusters: dict[int, list[HeadId]]
    expected_pivots: dict[int, HeadId]

    def to_json_dict(self) -> dict:
        return {
            "roles": [
                {"layer": layer, "head": head, "role": role}
                for (layer, head), role in sorted(self.roles.items())
            ],
            "clusters": [
                {
                    "cluster_id": cid,
                    "members": [list(m) for m in members],
                    "expected_pivot": list(self.expected_pivots[cid]),
                }
                for cid, members in sorted(self.clusters.items())
            ],
        }


class _Trajectory:
    """A drifting hot set: ordered positions with oldest-first replacement."""

    def __init__(self, rng: np.random.Generator, seq_len: int, hot_size: int):
        self._rng = rng
        self._seq_len = seq_len
        self.hot_size = hot_size
        self._pool = rng.permutation(seq_len)
        self._ptr = hot_size
        self.members: list[int] = [int(p) for p in self._pool[:hot_size]]
        self._member_set = set(self.members)
        self._birth = list(range(hot_size))
        self._counter = hot_size

    def _fresh(self, n: int) -> list[int]:
        out: list[int] = []
        taken = set(self._member_set)
        while len(out) < n:
            if self._ptr >= len(self._pool):
                complement = np.setdiff1d(
                    np.arange(self._seq_len),
                    np.fromiter(taken, dtype=np.int64, count=len(taken)),
                )
                if complement.size == 0:
                    raise SynthSpecError(
                        "drift needs more fresh positions than the sequence has"
                    )
                self._pool = self._rng.permutation(complement)
                self._ptr = 0
            candidate = int(self._pool[self._ptr])
            self._ptr += 1
            if candidate not in taken:
                taken.add(candidate)
                out.append(candidate)
        return out

    def replace(self, fraction: float) -> None:
        n = int(round(fraction * self.hot_size))
        if n <= 0:
            return
        n = min(n, self.hot_size)
        fresh = self._fresh(n)
        slots = sorted(range(self.hot_size), key=lambda i: self._birth[i])[:n]
        for slot, position in zip(slots, fresh):
            self._member_set.discard(self.members[slot])
            self.members[slot] = position
            self._member_set.add(position)
            self._birth[slot] = self._counter
            self._counter += 1


def _noise_positions(
    rng: np.random.Generator, seq_len: int, exclude: set[int], n: int
) -> list[int]:
    out: list[int] = []
    taken = set(exclude)
    while len(out) < n:
        candidate = int(rng.integers(0, seq_len))
        if candidate not in taken:
            taken.add(candidate)
            out.append(candidate)
    return out


def generate_synthetic(spec: SynthSpec) -> tuple[AttentionTrace, GroundTruth]:
    """Generate a trace (and its ground-truth labels) from the spec.

    Deterministic: equal seed and spec yield byte-identical traces.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    manifest = spec.manifest()
    L, T, K = spec.prefill_len, spec.decode_steps, spec.trace_topk
    head_ids = spec.head_ids()

    # Trajectory construction order is fixed (clusters by id, then heads in
    # (layer, head) order) so rng consumption is reproducible.
    cluster_traj: dict[int, _Trajectory] = {}
    for cid in sorted(spec.clusters):
        cluster_traj[cid] = _Trajectory(rng, L, spec.clusters[cid].hot_size)
    head_traj: dict[HeadId, _Trajectory] = {}
    private_pool: dict[HeadId, np.ndarray] = {}
    for head_id in head_ids:
        arch = spec.archetypes[head_id]
        if isinstance(arch, (StableHead, DecayingHead)):
            head_traj[head_id] = _Trajectory(rng, L, arch.hot_size)
        else:
            private_pool[head_id] = rng.permutation(L)

    events_by_step: dict[int, list[DriftEvent]] = {}
    for event in spec.drift_events:
        events_by_step.setdefault(event.step, []).append(event)

    shape = (T + 1, spec.num_layers, spec.heads_per_layer, K)
    indices = np.full(shape, PAD_INDEX, dtype=np.uint32)
    scores = np.zeros(shape, dtype=np.float32)

    def emit(step: int, head_id: HeadId, positions: Sequence[int]) -> None:
        layer, head = head_id
        m = len(positions)
        indices[step, layer, head, :m] = positions
        scores[step, layer, head, :m] = SCORE_RATIO ** np.arange(m, dtype=np.float32)

    def member_positions(head_id: HeadId, arch: ClusterMember) -> list[int]:
        traj = cluster_traj[arch.cluster_id]
        size = traj.hot_size
        n_shared = int(round(arch.agreement_rate * size))
        shared = traj.members[:n_shared]
        taken = set(shared)
        fill: list[int] = []
        for position in private_pool[head_id]:
            if len(fill) >= size - n_shared:
                break
            p = int(position)
            if p not in taken:
                taken.add(p)
                fill.append(p)
        return shared + fill

    for step in range(T + 1):
        if step >= 1:
            for event in events_by_step.get(step, ()):
                shifted_clusters: set[int] = set()
                for head_id in event.heads:
                    arch = spec.archetypes[head_id]
                    if isinstance(arch, ClusterMember):
                        if arch.cluster_id not in shifted_clusters:
                            shifted_clusters.add(arch.cluster_id)
                            cluster_traj[arch.cluster_id].replace(event.replace_fraction)
                    else:
                        head_traj[head_id].replace(event.replace_fraction)
            for cid in sorted(cluster_traj):
                drift = spec.clusters[cid].drift_rate
                if drift > 0.0:
                    cluster_traj[cid].replace(drift)
            for head_id in head_ids:
                arch = spec.archetypes[head_id]
                if isinstance(arch, DecayingHead) and arch.drift_rate > 0.0:
                    head_traj[head_id].replace(arch.drift_rate)

        for head_id in head_ids:
            arch = spec.archetypes[head_id]
            if isinstance(arch, StableHead):
                positions = list(head_traj[head_id].members)
                if step >= 1 and arch.noise_rate > 0.0:
                    n_noise = int(round(arch.noise_rate * arch.hot_size))
                    n_noise = min(n_noise, arch.hot_size)
                    if n_noise > 0:
                        slots = rng.choice(arch.hot_size, size=n_noise, replace=False)
                        noise = _noise_positions(
                            rng, L, head_traj[head_id]._member_set, n_noise
                        )
                        for slot, position in zip(slots, noise):
                            positions[int(slot)] = position
            elif isinstance(arch, DecayingHead):
                positions = list(head_traj[head_id].members)
            else:
                positions = member_positions(head_id, arch)
            emit(step, head_id, positions)

    trace = make_trace(manifest, indices, scores)

    roles: dict[HeadId, str] = {}
    clusters: dict[int, tuple[HeadId, ...]] = {}
    expected_pivots: dict[int, HeadId] = {}
    for cid in sorted(spec.clusters):
        members = tuple(spec.cluster_members(cid))
        clusters[cid] = members
        expected_pivots[cid] = members[0]
    for head_id in head_ids:
        arch = spec.archetypes[head_id]
        if isinstance(arch, StableHead):
            roles[head_id] = "anchor"
        elif isinstance(arch, DecayingHead):
            roles[head_id] = "volatile"
        else:
            pivot = expected_pivots[arch.cluster_id]
            roles[head_id] = "pivot" if head_id == pivot else "satellite"

    return trace, GroundTruth(roles=roles, clusters=clusters, expected_pivots=expected_pivots)


def synth_spec_from_json(payload: dict) -> SynthSpec:
    """Parse the JSON form used by config files into a SynthSpec."""
    try:
        archetypes: dict[HeadId, Archetype] = {}
        for entry in payload["heads"]:
            head_id = (int(entry["layer"]), int(entry["head"]))
            kind = entry["kind"]
            if kind == "stable":
                archetypes[head_id] = StableHead(
                    hot_size=int(entry["hot_size"]),
                    noise_rate=float(entry.get("noise_rate", 0.0)),
                )
            elif kind == "decaying":
                archetypes[head_id] = DecayingHead(
                    hot_size=int(entry["hot_size"]),
                    drift_rate=float(entry["drift_rate"]),
                )
            elif kind == "cluster":
                archetypes[head_id] = ClusterMember(
                    cluster_id=int(entry["cluster_id"]),
                    agreement_rate=float(entry.get("agreement_rate", 1.0)),
                )
            else:
                raise SynthSpecError(f"unknown archetype kind {kind!r}")
        clusters = {
            int(entry["cluster_id"]): ClusterSpec(
                hot_size=int(entry["hot_size"]),
                drift_rate=float(entry.get("drift_rate", 0.0)),
            )
            for entry in payload.get("clusters", [])
        }
        drift_events = tuple(
            DriftEvent(
                step=int(entry["step"]),
                heads=tuple((int(l), int(h)) for l, h in entry["heads"]),
                replace_fraction=float(entry["replace_fraction"]),
            )
            for entry in payload.get("drift_events", [])
        )
        spec = SynthSpec(
            num_layers=int(payload["num_layers"]),
            heads_per_layer=int(payload["heads_per_layer"]),
            prefill_len=int(payload["prefill_len"]),
            decode_steps=int(payload["decode_steps"]),
            trace_topk=int(payload["trace_topk"]),
            archetypes=archetypes,
            clusters=clusters,
            drift_events=drift_events,
            seed=int(payload.get("seed", 0)),
            model_name=str(payload.get("model_name", "synthetic")),
            bytes_per_kv_entry=int(payload.get("bytes_per_kv_entry", 256)),
        )
        spec.validate()
        return spec
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SynthSpecError):
            raise
        raise SynthSpecError(f"malformed synthetic spec: {exc}") from exc

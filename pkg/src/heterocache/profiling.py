"""Head profiling and role taxonomy.

Reads calibration traces, scores every head for stability (agreement with its
own prefill top-k over time) and similarity (agreement with same-layer peers),
then partitions heads into four roles:

  volatile   unstable loner; keeps its full cache
  anchor     stable loner; keeps a compressed cache, no refresh needed
  pivot      cluster representative; keeps its full cache and is watched for
             drift on behalf of its satellites
  satellite  cluster member; keeps a compressed cache refreshed from its
             pivot's live attention when the pivot drifts

Clusters come from greedy star clustering of the same-layer agreement graph:
repeatedly promote the head with the most unassigned neighbors to pivot and
absorb those neighbors as its satellites.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .metrics import (
    NoPeersError,
    default_profiling_topk,
    head_step_sets,
    overlap_coefficient,
    similarity_score,
    stability_score,
)
from .trace import AttentionTrace, TraceInvariantError

HeadId = tuple  # (layer, head)

ROLES = ("volatile", "anchor", "pivot", "satellite")
FULL_ROLES = ("volatile", "pivot")
COMPRESSED_ROLES = ("anchor", "satellite")


class TaxonomyError(ValueError):
    """Raised for malformed profiling inputs or inconsistent taxonomy data."""


@dataclass(frozen=True)
class ProfileConfig:
    """Knobs for profiling and role assignment.

    profiling_topk None means min(1000, ceil(prefill_len / 10)), resolved per
    trace. adjacency_step None means pair agreement is the median over all
    decode steps; an integer pins it to that single step.
    """

    tau_stable: float = 0.5
    tau_sim: float = 0.5
    profiling_topk: Optional[int] = None
    adjacency_step: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.tau_stable <= 1.0:
            raise TaxonomyError(f"tau_stable must be in [0, 1], got {self.tau_stable}")
        if not 0.0 <= self.tau_sim <= 1.0:
            raise TaxonomyError(f"tau_sim must be in [0, 1], got {self.tau_sim}")
        if self.profiling_topk is not None and self.profiling_topk < 1:
            raise TaxonomyError(
                f"profiling_topk must be positive, got {self.profiling_topk}"
            )

    def effective_topk(self, prefill_len: int) -> int:
        if self.profiling_topk is not None:
            return self.profiling_topk
        return default_profiling_topk(prefill_len)


@dataclass(frozen=True)
class HeadScores:
    s_stable: float
    s_sim: float


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    pivot: HeadId
    satellites: tuple

    def members(self):
        return (self.pivot,) + tuple(self.satellites)


@dataclass(frozen=True)
class HeadProfile:
    layer: int
    head: int
    s_stable: float
    s_sim: float
    role: str
    cluster_id: Optional[int] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise TaxonomyError(f"unknown role {self.role!r}")
        in_cluster = self.role in ("pivot", "satellite")
        if in_cluster != (self.cluster_id is not None):
            raise TaxonomyError(
                f"head ({self.layer}, {self.head}): role {self.role} and "
                f"cluster_id {self.cluster_id} are inconsistent"
            )

    @property
    def head_id(self) -> HeadId:
        return (self.layer, self.head)


@dataclass(frozen=True)
class TaxonomyResult:
    num_layers: int
    heads_per_layer: int
    tau_stable: float
    tau_sim: float
    profiling_topk: Optional[int]
    heads: dict = field(hash=False)  # HeadId -> HeadProfile
    clusters: tuple = ()  # Cluster, ordered by cluster_id

    def role_counts(self) -> dict:
        counts = {role: 0 for role in ROLES}
        for profile in self.heads.values():
            counts[profile.role] += 1
        return counts

    def full_heads(self) -> list:
        return sorted(h for h, p in self.heads.items() if p.role in FULL_ROLES)

    def compressed_heads(self) -> list:
        return sorted(h for h, p in self.heads.items() if p.role in COMPRESSED_ROLES)

    def pivots(self) -> list:
        return sorted(h for h, p in self.heads.items() if p.role == "pivot")

    def cluster_of(self, head_id: HeadId) -> Optional[Cluster]:
        cid = self.heads[head_id].cluster_id
        if cid is None:
            return None
        return self.clusters[cid]

    def to_json_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "heads_per_layer": self.heads_per_layer,
            "tau_stable": self.tau_stable,
            "tau_sim": self.tau_sim,
            "profiling_topk": self.profiling_topk,
            "heads": [
                {
                    "layer": p.layer,
                    "head": p.head,
                    "s_stable": p.s_stable,
                    "s_sim": p.s_sim,
                    "role": p.role,
                    "cluster_id": p.cluster_id,
                }
                for _, p in sorted(self.heads.items())
            ],
            "clusters": [
                {
                    "cluster_id": c.cluster_id,
                    "pivot": list(c.pivot),
                    "satellites": [list(s) for s in c.satellites],
                }
                for c in self.clusters
            ],
            "role_counts": self.role_counts(),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TaxonomyResult":
        try:
            heads = {}
            for entry in payload["heads"]:
                p = HeadProfile(
                    layer=int(entry["layer"]),
                    head=int(entry["head"]),
                    s_stable=float(entry["s_stable"]),
                    s_sim=float(entry["s_sim"]),
                    role=str(entry["role"]),
                    cluster_id=(
                        None if entry["cluster_id"] is None else int(entry["cluster_id"])
                    ),
                )
                heads[p.head_id] = p
            clusters = tuple(
                Cluster(
                    cluster_id=int(entry["cluster_id"]),
                    pivot=tuple(int(x) for x in entry["pivot"]),
                    satellites=tuple(
                        tuple(int(x) for x in s) for s in entry["satellites"]
                    ),
                )
                for entry in payload["clusters"]
            )
            result = cls(
                num_layers=int(payload["num_layers"]),
                heads_per_layer=int(payload["heads_per_layer"]),
                tau_stable=float(payload["tau_stable"]),
                tau_sim=float(payload["tau_sim"]),
                profiling_topk=(
                    None
                    if payload.get("profiling_topk") is None
                    else int(payload["profiling_topk"])
                ),
                heads=heads,
                clusters=clusters,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, TaxonomyError):
                raise
            raise TaxonomyError(f"malformed taxonomy payload: {exc}") from exc
        result.validate()
        return result

    def validate(self) -> None:
        expected = {
            (l, h)
            for l in range(self.num_layers)
            for h in range(self.heads_per_layer)
        }
        if set(self.heads) != expected:
            raise TaxonomyError("taxonomy must cover every head exactly once")
        for i, cluster in enumerate(self.clusters):
            if cluster.cluster_id != i:
                raise TaxonomyError("cluster ids must be consecutive from zero")
            members = cluster.members()
            if len(set(members)) != len(members) or len(members) < 2:
                raise TaxonomyError(f"cluster {i} is degenerate")
            layers = {l for l, _ in members}
            if len(layers) != 1:
                raise TaxonomyError(f"cluster {i} spans layers {sorted(layers)}")
            if self.heads[cluster.pivot].role != "pivot":
                raise TaxonomyError(f"cluster {i} pivot has a non-pivot role")
            for s in cluster.satellites:
                if self.heads[s].role != "satellite" or self.heads[s].cluster_id != i:
                    raise TaxonomyError(f"cluster {i} satellite {s} is inconsistent")
        for head_id, p in self.heads.items():
            if p.cluster_id is not None:
                if p.cluster_id >= len(self.clusters):
                    raise TaxonomyError(f"head {head_id} references a missing cluster")
                if head_id not in self.clusters[p.cluster_id].members():
                    raise TaxonomyError(f"head {head_id} is not in its own cluster")


def aggregate_gqa(query_scores: np.ndarray, group_size: int) -> np.ndarray:
    """Mean-pool per-query-head attention rows into KV-head rows.

    Input is (num_query_heads, positions); consecutive groups of group_size
    query heads share one KV head.
    """
    scores = np.asarray(query_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"expected a 2-D (heads, positions) array, got {scores.shape}")
    n_q = scores.shape[0]
    if group_size < 1 or n_q % group_size:
        raise ValueError(
            f"group size {group_size} does not divide {n_q} query heads"
        )
    return scores.reshape(n_q // group_size, group_size, -1).mean(axis=1)


def _check_same_geometry(traces) -> tuple:
    if not traces:
        raise TaxonomyError("profiling requires at least one trace")
    first = traces[0].manifest
    for t in traces[1:]:
        m = t.manifest
        if (m.num_layers, m.heads_per_layer) != (
            first.num_layers,
            first.heads_per_layer,
        ):
            raise TraceInvariantError(
                "calibration traces disagree on layer/head counts"
            )
    return first.num_layers, first.heads_per_layer


def profile(traces, config: ProfileConfig = ProfileConfig()) -> dict:
    """Average stability and similarity scores across calibration traces.

    Returns HeadId -> HeadScores. A head with no same-layer peer gets
    similarity 0.0 (it can never be clustered).
    """
    num_layers, heads_per_layer = _check_same_geometry(traces)
    sums = {
        (l, h): [0.0, 0.0]
        for l in range(num_layers)
        for h in range(heads_per_layer)
    }
    for trace in traces:
        k = config.effective_topk(trace.manifest.prefill_len)
        sets = head_step_sets(trace, k)
        for layer in range(num_layers):
            for head in range(heads_per_layer):
                own = sets[(layer, head)]
                s_stable = stability_score(own[1:], own[0])
                try:
                    s_sim = similarity_score(
                        own[1:],
                        [
                            sets[(layer, p)][1:]
                            for p in range(heads_per_layer)
                            if p != head
                        ],
                    )
                except NoPeersError:
                    s_sim = 0.0
                sums[(layer, head)][0] += s_stable
                sums[(layer, head)][1] += s_sim
    n = len(traces)
    return {
        head_id: HeadScores(s_stable=acc[0] / n, s_sim=acc[1] / n)
        for head_id, acc in sums.items()
    }


def build_adjacency(traces, config: ProfileConfig = ProfileConfig()) -> dict:
    """Same-layer agreement graph: HeadId -> frozenset of neighbor HeadIds.

    An edge exists when the pair's agreement (median over decode steps of the
    overlap of their top-k sets, averaged across traces) reaches tau_sim.
    """
    num_layers, heads_per_layer = _check_same_geometry(traces)
    pair_sums: dict = {}
    for trace in traces:
        m = trace.manifest
        k = config.effective_topk(m.prefill_len)
        sets = head_step_sets(trace, k)
        if config.adjacency_step is not None:
            steps = [config.adjacency_step]
            if not 1 <= config.adjacency_step <= m.decode_steps:
                raise TaxonomyError(
                    f"adjacency step {config.adjacency_step} outside decode range "
                    f"1..{m.decode_steps}"
                )
        else:
            steps = range(1, m.decode_steps + 1)
        for layer in range(num_layers):
            for h1 in range(heads_per_layer):
                for h2 in range(h1 + 1, heads_per_layer):
                    vals = [
                        overlap_coefficient(
                            sets[(layer, h1)][t], sets[(layer, h2)][t]
                        )
                        for t in steps
                    ]
                    key = (layer, h1, h2)
                    pair_sums[key] = pair_sums.get(key, 0.0) + float(np.median(vals))
    n = len(traces)
    adjacency = {
        (l, h): set()
        for l in range(num_layers)
        for h in range(heads_per_layer)
    }
    for (layer, h1, h2), total in pair_sums.items():
        if total / n >= config.tau_sim:
            adjacency[(layer, h1)].add((layer, h2))
            adjacency[(layer, h2)].add((layer, h1))
    return {head: frozenset(nbrs) for head, nbrs in adjacency.items()}


def greedy_star_cluster(adjacency: dict) -> tuple:
    """Greedy star decomposition of the agreement graph.

    Repeatedly pick the node with the most still-unassigned neighbors (ties
    to the lowest (layer, head)), make it a pivot, and assign those neighbors
    as its satellites. Stops when no node has an unassigned neighbor; the
    rest are returned unclustered.
    """
    unassigned = set(adjacency)
    clusters = []
    while True:
        best = None
        best_degree = 0
        for node in sorted(unassigned):
            degree = len(adjacency[node] & unassigned - {node})
            if degree > best_degree:
                best, best_degree = node, degree
        if best is None:
            break
        satellites = tuple(sorted(adjacency[best] & unassigned - {best}))
        clusters.append(
            Cluster(cluster_id=len(clusters), pivot=best, satellites=satellites)
        )
        unassigned -= {best, *satellites}
    return tuple(clusters), sorted(unassigned)


def assign_roles(
    scores: dict, clusters, unclustered, config: ProfileConfig, *, num_layers, heads_per_layer
) -> TaxonomyResult:
    """Final role assignment from scores and the clustering.

    Clustered heads become pivots or satellites; every other head (loners
    and cluster leftovers alike) is an anchor when stable enough, otherwise
    volatile.
    """
    heads = {}
    cluster_id_of = {}
    for cluster in clusters:
        for member in cluster.members():
            cluster_id_of[member] = cluster.cluster_id
    pivot_set = {c.pivot for c in clusters}
    for head_id, sc in scores.items():
        layer, head = head_id
        if head_id in cluster_id_of:
            role = "pivot" if head_id in pivot_set else "satellite"
            cid = cluster_id_of[head_id]
        else:
            role = "anchor" if sc.s_stable >= config.tau_stable else "volatile"
            cid = None
        heads[head_id] = HeadProfile(
            layer=layer,
            head=head,
            s_stable=sc.s_stable,
            s_sim=sc.s_sim,
            role=role,
            cluster_id=cid,
        )
    result = TaxonomyResult(
        num_layers=num_layers,
        heads_per_layer=heads_per_layer,
        tau_stable=config.tau_stable,
        tau_sim=config.tau_sim,
        profiling_topk=config.profiling_topk,
        heads=heads,
        clusters=tuple(clusters),
    )
    result.validate()
    return result


def run_taxonomy(traces, config: ProfileConfig = ProfileConfig()) -> TaxonomyResult:
    """Profile, cluster, and assign roles in one pass over the traces."""
    num_layers, heads_per_layer = _check_same_geometry(traces)
    scores = profile(traces, config)
    adjacency = build_adjacency(traces, config)
    clusters, unclustered = greedy_star_cluster(adjacency)
    return assign_roles(
        scores,
        clusters,
        unclustered,
        config,
        num_layers=num_layers,
        heads_per_layer=heads_per_layer,
    )

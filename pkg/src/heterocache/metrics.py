"""Index-set metrics over attention traces.

The unit of comparison everywhere is an index set: the top-k attended
positions of one head at one step. Selection uses a fixed tie-break (pooled
value desc, then raw weight desc, then position asc) so that every component,
and any independent reimplementation, picks identical sets.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from math import ceil

import numpy as np

from .trace import PAD_INDEX, AttentionTrace

IndexSet = frozenset
HeadId = tuple  # (layer, head)


class NoPeersError(ValueError):
    """Similarity is undefined for a head with no same-layer peers."""


def _dense_top_k(weights: np.ndarray, k: int, pool_kernel: int) -> IndexSet:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError(f"dense scores must be 1-D, got shape {w.shape}")
    if pool_kernel:
        if pool_kernel < 1 or pool_kernel % 2 == 0:
            raise ValueError(f"pool kernel must be odd and positive, got {pool_kernel}")
        # Zero-padded moving average; positions near the edges see a shorter
        # window but the same divisor.
        pooled = np.convolve(w, np.ones(pool_kernel), mode="same") / pool_kernel
    else:
        pooled = w
    order = np.lexsort((np.arange(w.size), -w, -pooled))
    return frozenset(int(i) for i in order[:k])


def _sparse_top_k(pairs, k: int) -> IndexSet:
    live = [(int(i), float(s)) for i, s in pairs if int(i) != PAD_INDEX]
    live.sort(key=lambda p: (-p[1], p[0]))
    return frozenset(i for i, _ in live[:k])


def top_k_indices(scores, k: int, pool_kernel: int = 0) -> IndexSet:
    """Select the top-k positions from dense weights or (index, weight) pairs.

    Dense input is a 1-D vector of attention weights over positions, and may
    be average-pooled first. Sparse input is a sequence of (index, weight)
    pairs, as stored in traces; padding entries are ignored and pooling is
    not applicable. If fewer than k candidates exist, all of them are
    returned.
    """
    if k < 0:
        raise ValueError(f"k must be nonnegative, got {k}")
    if k == 0:
        return frozenset()
    if isinstance(scores, np.ndarray):
        return _dense_top_k(scores, k, pool_kernel)
    seq = list(scores)
    if not seq:
        return frozenset()
    first = seq[0]
    if isinstance(first, (tuple, list)) and len(first) == 2:
        if pool_kernel:
            raise ValueError("pooling requires dense scores, not (index, weight) pairs")
        return _sparse_top_k(seq, k)
    return _dense_top_k(np.asarray(seq, dtype=np.float64), k, pool_kernel)


def overlap_coefficient(a, b) -> float:
    """|A intersect B| / min(|A|, |B|). Empty operands are an error."""
    sa, sb = set(a), set(b)
    if not sa or not sb:
        raise ValueError("overlap coefficient is undefined for empty index sets")
    return len(sa & sb) / min(len(sa), len(sb))


def stability_score(decode_sets: Sequence[IndexSet], prefill_set: IndexSet) -> float:
    """Median over decode steps of overlap with the prefill index set."""
    sets = list(decode_sets)
    if not sets:
        raise ValueError("stability requires at least one decode step")
    return float(np.median([overlap_coefficient(s, prefill_set) for s in sets]))


def similarity_score(
    own_sets: Sequence[IndexSet], peer_sets: Sequence[Sequence[IndexSet]]
) -> float:
    """Median over decode steps of the best same-step overlap with any peer."""
    own = list(own_sets)
    peers = [list(p) for p in peer_sets]
    if not peers:
        raise NoPeersError("similarity is undefined without same-layer peers")
    if not own:
        raise ValueError("similarity requires at least one decode step")
    for p in peers:
        if len(p) != len(own):
            raise ValueError("peer step sequences must align with the head's own")
    maxima = [
        max(overlap_coefficient(own[t], p[t]) for p in peers) for t in range(len(own))
    ]
    return float(np.median(maxima))


def default_profiling_topk(prefill_len: int) -> int:
    return min(1000, ceil(prefill_len / 10))


def head_step_sets(trace: AttentionTrace, k: int) -> Mapping[HeadId, list]:
    """Per-head top-k index sets for every recorded step (prefill first).

    If a head recorded fewer than k live entries at some step, the set holds
    all of them.
    """
    m = trace.manifest
    out = {}
    for layer in range(m.num_layers):
        for head in range(m.heads_per_layer):
            idx = trace.indices[:, layer, head, :]
            sc = trace.scores[:, layer, head, :]
            sets = []
            for s in range(m.decode_steps + 1):
                sets.append(_sparse_top_k(zip(idx[s], sc[s]), k))
            out[(layer, head)] = sets
    return out


def layer_similarity_matrix(
    trace: AttentionTrace, step: int, k: int | None = None
) -> np.ndarray:
    """Cross-layer redundancy snapshot at one step.

    Entry (i, j) is the mean over heads of layer i of the best overlap with
    any head of layer j; a head is never matched against itself, and a layer
    with a single head contributes 0.0 on the diagonal.
    """
    m = trace.manifest
    if not 0 <= step <= m.decode_steps:
        raise IndexError(f"step {step} out of range 0..{m.decode_steps}")
    if k is None:
        k = default_profiling_topk(m.prefill_len)
    sets = {}
    for layer in range(m.num_layers):
        for head in range(m.heads_per_layer):
            row = zip(trace.indices[step, layer, head], trace.scores[step, layer, head])
            sets[(layer, head)] = _sparse_top_k(row, k)
    matrix = np.zeros((m.num_layers, m.num_layers), dtype=np.float64)
    for i in range(m.num_layers):
        for j in range(m.num_layers):
            per_head = []
            for h in range(m.heads_per_layer):
                candidates = [
                    overlap_coefficient(sets[(i, h)], sets[(j, hp)])
                    for hp in range(m.heads_per_layer)
                    if not (i == j and hp == h)
                ]
                per_head.append(max(candidates) if candidates else 0.0)
            matrix[i, j] = sum(per_head) / len(per_head)
    return matrix

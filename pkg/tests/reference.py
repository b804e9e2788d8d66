"""Independent reference implementations used as oracles.

Everything here is deliberately naive: pure-Python scalar loops, sorted() and
statistics.median, Fraction arithmetic for apportionment, and a straight-line
replay of the drift-retrieval inference loop. These stay independent of the
package's fast paths; the only shared code is the trace container itself.

The top-k tie-break convention (pooled value desc, raw weight desc, index asc)
and the window-boundary evaluation cadence are artifact-wide conventions, so
both sides implement them, each in its own way.
"""

from __future__ import annotations

import statistics
from fractions import Fraction
from math import ceil, floor

from heterocache.trace import PAD_INDEX, AttentionTrace


# ---------------------------------------------------------------------------
# Set extraction and overlap metrics
# ---------------------------------------------------------------------------


def ref_head_pairs(trace: AttentionTrace, step: int, layer: int, head: int):
    """Live (index, score) pairs for one head at one step."""
    out = []
    for i in range(trace.manifest.trace_topk):
        idx = int(trace.indices[step, layer, head, i])
        if idx == PAD_INDEX:
            continue
        out.append((idx, float(trace.scores[step, layer, head, i])))
    return out


def ref_top_k_sparse(pairs, k):
    """Top-k index set from (index, score) pairs: score desc, index asc."""
    ranked = sorted(pairs, key=lambda p: (-p[1], p[0]))
    return frozenset(idx for idx, _ in ranked[:k])


def ref_top_k_dense(weights, k, kernel):
    """Top-k over a dense vector with optional zero-padded average pooling."""
    n = len(weights)
    if kernel and kernel > 0:
        half = kernel // 2
        pooled = []
        for i in range(n):
            total = 0.0
            for j in range(i - half, i + half + 1):
                if 0 <= j < n:
                    total += weights[j]
            pooled.append(total / kernel)
    else:
        pooled = list(weights)
    order = sorted(range(n), key=lambda i: (-pooled[i], -weights[i], i))
    return frozenset(order[:k])


def ref_overlap(a, b):
    if not a or not b:
        raise ValueError("empty set")
    return len(set(a) & set(b)) / min(len(a), len(b))


def ref_head_set(trace, step, layer, head, k):
    return ref_top_k_sparse(ref_head_pairs(trace, step, layer, head), k)


def ref_stability(trace: AttentionTrace, layer: int, head: int, k: int) -> float:
    """Median over decode steps of overlap with the prefill top-k set."""
    prefill = ref_head_set(trace, 0, layer, head, k)
    overlaps = [
        ref_overlap(ref_head_set(trace, t, layer, head, k), prefill)
        for t in range(1, trace.manifest.decode_steps + 1)
    ]
    return statistics.median(overlaps)


def ref_similarity(trace: AttentionTrace, layer: int, head: int, k: int) -> float:
    """Median over decode steps of the max overlap with any same-layer peer."""
    peers = [h for h in range(trace.manifest.heads_per_layer) if h != head]
    if not peers:
        raise ValueError("no peers")
    maxima = []
    for t in range(1, trace.manifest.decode_steps + 1):
        own = ref_head_set(trace, t, layer, head, k)
        maxima.append(
            max(ref_overlap(own, ref_head_set(trace, t, layer, p, k)) for p in peers)
        )
    return statistics.median(maxima)


def ref_layer_matrix(trace: AttentionTrace, step: int, k: int):
    """num_layers x num_layers mean-of-max-overlap matrix at one step."""
    m = trace.manifest
    sets = {
        (layer, head): ref_head_set(trace, step, layer, head, k)
        for layer in range(m.num_layers)
        for head in range(m.heads_per_layer)
    }
    matrix = [[0.0] * m.num_layers for _ in range(m.num_layers)]
    for i in range(m.num_layers):
        for j in range(m.num_layers):
            per_head = []
            for h in range(m.heads_per_layer):
                candidates = [
                    ref_overlap(sets[(i, h)], sets[(j, hp)])
                    for hp in range(m.heads_per_layer)
                    if not (i == j and hp == h)
                ]
                per_head.append(max(candidates) if candidates else 0.0)
            matrix[i][j] = sum(per_head) / len(per_head)
    return matrix


def ref_pairwise_median_overlap(trace: AttentionTrace, layer: int, h1: int, h2: int, k: int) -> float:
    vals = [
        ref_overlap(
            ref_head_set(trace, t, layer, h1, k), ref_head_set(trace, t, layer, h2, k)
        )
        for t in range(1, trace.manifest.decode_steps + 1)
    ]
    return statistics.median(vals)


# ---------------------------------------------------------------------------
# Budget apportionment (Fraction-exact)
# ---------------------------------------------------------------------------


def ref_base_length(rho, num_heads, num_full, num_comp, prefill_len):
    return (rho * num_heads - num_full) * prefill_len / num_comp


def ref_round_half_up(x: Fraction) -> int:
    return floor(x + Fraction(1, 2))


def ref_largest_remainder(shares, total):
    """Integerize exact Fraction shares so they sum to total."""
    floors = [floor(s) for s in shares]
    leftover = total - sum(floors)
    order = sorted(
        range(len(shares)), key=lambda i: (-(shares[i] - floors[i]), i)
    )
    out = list(floors)
    for i in order[:leftover]:
        out[i] += 1
    return out


def ref_allocate(stabilities, l_base: Fraction, epsilon: Fraction):
    """Exact inverse-stability largest-remainder allocation (no clamping)."""
    n = len(stabilities)
    weights = [Fraction(1) / (Fraction(s) + epsilon) for s in stabilities]
    total_w = sum(weights)
    budget = ref_round_half_up(Fraction(n) * l_base)
    shares = [Fraction(budget) * w / total_w for w in weights]
    return ref_largest_remainder(shares, budget), budget, shares


# ---------------------------------------------------------------------------
# Straight-line replay of the hierarchical-cache inference loop
# ---------------------------------------------------------------------------


def ref_replay(
    trace: AttentionTrace,
    roles: dict,
    cluster_of: dict,
    lengths: dict,
    l_base_int: int,
    tau_drift: float,
    window: int,
    variant: str = "heterocache",
    update_delay_steps: int = 1,
    transfer_bandwidth: int = 1 << 30,
    sink_count: int = 4,
    recency_window: int = 8,
):
    """Replay the two-tier cache loop with plain dicts and loops.

    roles: head id -> "volatile" | "anchor" | "pivot" | "satellite"
    cluster_of: head id -> cluster id (pivots and satellites only)
    lengths: compressed head id -> planned cache length
    Returns a dict with retrieval events, per-step recalls, per-step charged
    entry counts, cumulative bytes, and final GPU sets.
    """
    m = trace.manifest
    L, T = m.prefill_len, m.decode_steps
    heads = [(l, h) for l in range(m.num_layers) for h in range(m.heads_per_layer)]
    full = {h for h in heads if roles[h] in ("volatile", "pivot")}
    comp = [h for h in heads if roles[h] in ("anchor", "satellite")]
    pivots = sorted(h for h in heads if roles[h] == "pivot")
    satellites_of = {
        p: sorted(
            s for s in heads if roles[s] == "satellite" and cluster_of[s] == cluster_of[p]
        )
        for p in pivots
    }

    def eff_len(h):
        return l_base_int if variant == "no_allocation" else lengths[h]

    sinks = set(range(min(sink_count, L)))

    dynamic = {}
    for h in comp:
        pairs = ref_head_pairs(trace, 0, *h)
        dynamic[h] = set(ref_top_k_sparse(pairs, eff_len(h)))

    k_base = {}
    for p in pivots:
        pairs = ref_head_pairs(trace, 0, *p)
        if len(pairs) < l_base_int:
            raise ValueError(f"pivot {p} has fewer than {l_base_int} prefill entries")
        k_base[p] = set(ref_top_k_sparse(pairs, l_base_int))

    def gpu_set(h, t):
        seq_len = L + t
        recency = set(range(max(0, seq_len - recency_window), seq_len))
        appends = set(range(L, seq_len))
        base = set(range(L)) if h in full else dynamic[h]
        return base | sinks | recency | appends

    def recall_at(t):
        per_head = []
        for h in heads:
            cached = gpu_set(h, t)
            pairs = ref_head_pairs(trace, t, *h)
            total = sum(s for _, s in pairs)
            hit = sum(s for i, s in pairs if i in cached)
            per_head.append(hit / total)
        return sum(per_head) / len(per_head)

    def charged(t):
        return sum(L if h in full else len(dynamic[h]) for h in heads)

    buffers = {p: [] for p in pivots}
    pending = []  # (completion, order, satellite, index set)
    events = []
    cumulative_bytes = 0
    order_counter = 0
    recalls = [recall_at(0)]
    charged_series = [charged(0)]
    bytes_series = [0]

    for t in range(1, T + 1):
        due = sorted([e for e in pending if e[0] <= t], key=lambda e: (e[0], e[1]))
        pending = [e for e in pending if e[0] > t]
        for _, _, sat, idx_set in due:
            dynamic[sat] = set(idx_set)

        step_recall = recall_at(t)
        triggered = False

        if variant != "no_retrieval":
            for p in pivots:
                pairs = ref_head_pairs(trace, t, *p)
                if len(pairs) < l_base_int:
                    raise ValueError(
                        f"pivot {p} has fewer than {l_base_int} entries at step {t}"
                    )
                k_t = set(ref_top_k_sparse(pairs, l_base_int))
                buffers[p].append(len(k_t & k_base[p]) / l_base_int)

            if t % window == 0:
                for p in pivots:
                    values = buffers[p]
                    fire = statistics.median(values) < tau_drift
                    if fire:
                        triggered = True
                        pairs = ref_head_pairs(trace, t, *p)
                        fetches = {}
                        total_fetch = 0
                        for s in satellites_of[p]:
                            fetched = ref_top_k_sparse(pairs, eff_len(s))
                            fetches[s] = frozenset(fetched)
                            total_fetch += len(fetched)
                        event_bytes = total_fetch * m.bytes_per_kv_entry
                        cumulative_bytes += event_bytes
                        completion = max(
                            t + update_delay_steps,
                            ceil(cumulative_bytes / transfer_bandwidth),
                        )
                        for s in satellites_of[p]:
                            pending.append((completion, order_counter, s, fetches[s]))
                            order_counter += 1
                        events.append(
                            {
                                "trigger_step": t,
                                "pivot": p,
                                "fetches": fetches,
                                "bytes": event_bytes,
                                "completion_step": completion,
                            }
                        )
                        k_base[p] = set(
                            ref_top_k_sparse(ref_head_pairs(trace, t, *p), l_base_int)
                        )
                    buffers[p] = []

        recalls.append(step_recall)
        charged_series.append(charged(t))
        bytes_series.append(cumulative_bytes)
        del triggered

    final_gpu = {h: frozenset(gpu_set(h, T)) for h in heads}
    return {
        "events": events,
        "recalls": recalls,
        "charged": charged_series,
        "cumulative_bytes": bytes_series,
        "final_gpu": final_gpu,
    }

"""Two-tier cache simulation with drift-triggered retrieval.

Replays a recorded decode against a hierarchical cache: full-cache heads
(volatile, pivot) keep every prefill entry on the GPU; compressed heads
(anchor, satellite) keep only their planned top slice, with the evicted
remainder notionally in host memory. Pivots are monitored for attention
drift; when a pivot's recent top sets stop overlapping its baseline, the
engine schedules a refresh of its satellites' GPU slices from the pivot's
current attention and restamps the baseline.

Step order within one decode step t (1-based):
  1. transfers whose completion step has arrived land (satellites swap sets)
  2. position prefill_len + t - 1 is appended to every head's cache
  3. recall and occupancy are measured
  4. pivots record their overlap-vs-baseline for this step
  5. at window boundaries (t divisible by the window), the buffered overlaps
     are tested: median below tau_drift schedules a retrieval completing at
     max(t + update_delay_steps, ceil(cumulative_bytes / bandwidth)); the
     buffer is cleared either way

Until a transfer completes, its satellites keep serving their stale sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil
from typing import Optional

import numpy as np

from .budget import BudgetPlan
from .evaluation import attention_recall
from .metrics import top_k_indices
from .profiling import TaxonomyResult
from .reporting import RetrievalRecord, SimulationReport, StepRow
from .trace import AttentionTrace, trace_fingerprint

HeadId = tuple  # (layer, head)

VARIANTS = ("heterocache", "no_allocation", "no_retrieval")


class EngineError(RuntimeError):
    """Inconsistent inputs handed to the simulator."""


class InfeasibleStateError(EngineError):
    """The trace or budget cannot support the requested simulation."""


@dataclass(frozen=True)
class EngineConfig:
    tau_drift: float = 0.5
    window: int = 8  # drift evaluation window, in decode steps
    transfer_bandwidth: int = 1 << 30  # bytes per decode step
    update_delay_steps: int = 1
    sink_count: int = 4
    recency_window: int = 8
    variant: str = "heterocache"
    eval_every_step: bool = False  # evaluate a sliding window instead of blocks

    def __post_init__(self):
        if not 0.0 <= self.tau_drift <= 1.0:
            raise EngineError(f"tau_drift must be in [0, 1], got {self.tau_drift}")
        if self.window < 1:
            raise EngineError(f"window must be positive, got {self.window}")
        if self.transfer_bandwidth < 1:
            raise EngineError(
                f"transfer_bandwidth must be positive, got {self.transfer_bandwidth}"
            )
        if self.update_delay_steps < 0:
            raise EngineError(
                f"update_delay_steps must be nonnegative, got {self.update_delay_steps}"
            )
        if self.sink_count < 0 or self.recency_window < 0:
            raise EngineError("sink_count and recency_window must be nonnegative")
        if self.variant not in VARIANTS:
            raise EngineError(f"unknown variant {self.variant!r}; expected {VARIANTS}")


@dataclass(frozen=True)
class CacheView:
    """Membership view of one head's GPU-resident positions at one step.

    base None means the head keeps its whole prefill. Decode appends are
    always resident; the first sink_count positions and the last
    recency_window positions of the current sequence are protected for every
    policy so comparisons stay fair.
    """

    prefill_len: int
    step: int
    base: Optional[frozenset]
    sink_count: int
    recency_window: int

    def __contains__(self, position: int) -> bool:
        if position >= self.prefill_len:
            return True  # appended during decode
        if self.base is None:
            return True
        if position < self.sink_count:
            return True
        if position >= self.prefill_len + self.step - self.recency_window:
            return True
        return position in self.base

    def size(self) -> int:
        L, t = self.prefill_len, self.step
        if self.base is None:
            return L + t
        extras = set(range(min(self.sink_count, L)))
        extras.update(range(max(0, L + t - self.recency_window), L))
        return len(self.base | extras) + t


@dataclass
class _Transfer:
    completion_step: int
    order: int
    satellite: HeadId
    indices: frozenset


@dataclass
class CacheState:
    """Mutable simulation state between decode steps."""

    step: int
    dynamic: dict  # compressed HeadId -> frozenset of GPU positions
    k_base: dict  # pivot HeadId -> baseline top set
    buffers: dict  # pivot HeadId -> list of buffered overlap values
    buffer_steps: dict  # pivot HeadId -> steps those values came from
    pending: list = field(default_factory=list)  # in-flight _Transfer items
    events: list = field(default_factory=list)  # RetrievalRecord, trigger order
    cumulative_bytes: int = 0
    _order_counter: int = 0

    def bytes_in_flight(self, step: int) -> int:
        return sum(
            e.transfer_bytes for e in self.events if e.completion_step > step
        )


@dataclass(frozen=True)
class EngineRun:
    report: SimulationReport
    final_gpu: dict  # HeadId -> frozenset of resident positions at the end
    state: CacheState


class CacheEngine:
    """Binds one trace to a taxonomy, a plan, and the drift knobs."""

    def __init__(
        self,
        trace: AttentionTrace,
        taxonomy: TaxonomyResult,
        plan: BudgetPlan,
        config: EngineConfig = EngineConfig(),
    ):
        m = trace.manifest
        if (taxonomy.num_layers, taxonomy.heads_per_layer) != (
            m.num_layers,
            m.heads_per_layer,
        ):
            raise EngineError(
                "taxonomy geometry does not match the trace: "
                f"{taxonomy.num_layers}x{taxonomy.heads_per_layer} vs "
                f"{m.num_layers}x{m.heads_per_layer}"
            )
        if plan.prefill_len != m.prefill_len:
            raise EngineError(
                f"plan was made for prefill {plan.prefill_len}, trace has {m.prefill_len}"
            )
        self.trace = trace
        self.taxonomy = taxonomy
        self.plan = plan
        self.config = config
        self.heads = [
            (layer, head)
            for layer in range(m.num_layers)
            for head in range(m.heads_per_layer)
        ]
        self.full = set(taxonomy.full_heads())
        self.comp = taxonomy.compressed_heads()
        if set(plan.lengths) != set(self.comp):
            raise EngineError("plan does not cover exactly the compressed heads")
        self.pivots = taxonomy.pivots()
        self.satellites_of = {
            p: tuple(self.taxonomy.cluster_of(p).satellites) for p in self.pivots
        }
        self.l_base_int = plan.l_base_int
        if self.l_base_int < 1:
            raise InfeasibleStateError(
                f"per-head base budget rounds to {self.l_base_int}; nothing to monitor"
            )
        monitoring = self.pivots and config.variant != "no_retrieval"
        if monitoring and m.trace_topk < self.l_base_int:
            raise InfeasibleStateError(
                f"trace records only {m.trace_topk} entries per head but drift "
                f"monitoring needs the top {self.l_base_int}"
            )
        planned = plan.num_full * m.prefill_len + (
            len(self.comp) * self.l_base_int
            if config.variant == "no_allocation"
            else sum(plan.lengths.values())
        )
        if planned > plan.budget_ceiling + plan.num_comp + 1e-9:
            raise InfeasibleStateError(
                f"planned GPU entries {planned} exceed the budget ceiling "
                f"{plan.budget_ceiling} plus rounding slack {plan.num_comp}"
            )

    # ---- primitives ----

    def effective_length(self, head_id: HeadId) -> int:
        if self.config.variant == "no_allocation":
            return self.l_base_int
        return self.plan.lengths[head_id]

    def _row_pairs(self, step: int, head_id: HeadId):
        layer, head = head_id
        return list(
            zip(self.trace.indices[step, layer, head], self.trace.scores[step, layer, head])
        )

    def _top_set(self, step: int, head_id: HeadId, k: int) -> frozenset:
        return top_k_indices(self._row_pairs(step, head_id), k)

    def pivot_top_set(self, step: int, pivot: HeadId) -> frozenset:
        """The pivot's monitored top set; the trace must be dense enough."""
        top = self._top_set(step, pivot, self.l_base_int)
        if len(top) < self.l_base_int:
            raise InfeasibleStateError(
                f"pivot {pivot} recorded only {len(top)} live entries at step "
                f"{step}, monitoring needs {self.l_base_int}"
            )
        return top

    def pivot_overlap(self, state: CacheState, pivot: HeadId, step: int) -> float:
        """Overlap of the pivot's current top set with its stored baseline."""
        current = self.pivot_top_set(step, pivot)
        return len(current & state.k_base[pivot]) / self.l_base_int

    @staticmethod
    def drift_check(values, tau_drift: float) -> bool:
        """True when the buffered overlaps say the head has drifted."""
        return bool(np.median(list(values)) < tau_drift)

    def gpu_view(self, state: CacheState, head_id: HeadId, step: int) -> CacheView:
        return CacheView(
            prefill_len=self.trace.manifest.prefill_len,
            step=step,
            base=None if head_id in self.full else state.dynamic[head_id],
            sink_count=self.config.sink_count,
            recency_window=self.config.recency_window,
        )

    # ---- lifecycle ----

    def prefill_init(self) -> CacheState:
        state = CacheState(step=0, dynamic={}, k_base={}, buffers={}, buffer_steps={})
        for head_id in self.comp:
            state.dynamic[head_id] = self._top_set(
                0, head_id, self.effective_length(head_id)
            )
        if self.config.variant != "no_retrieval":
            for p in self.pivots:
                state.k_base[p] = self.pivot_top_set(0, p)
                state.buffers[p] = []
                state.buffer_steps[p] = []
        return state

    def _measure(self, state: CacheState, step: int) -> tuple:
        m = self.trace.manifest
        recalls = []
        total_size = 0
        for head_id in self.heads:
            view = self.gpu_view(state, head_id, step)
            recalls.append(attention_recall(view, self._row_pairs(step, head_id)))
            total_size += view.size()
        charged = len(self.full) * m.prefill_len + sum(
            len(state.dynamic[h]) for h in self.comp
        )
        recall = sum(recalls) / len(recalls)
        return recall, charged, total_size - charged

    def decode_step(self, state: CacheState, step: int) -> StepRow:
        """Advance one decode step and return its time-series row."""
        cfg = self.config
        due = sorted(
            (tr for tr in state.pending if tr.completion_step <= step),
            key=lambda tr: (tr.completion_step, tr.order),
        )
        state.pending = [tr for tr in state.pending if tr.completion_step > step]
        for tr in due:
            state.dynamic[tr.satellite] = tr.indices

        state.step = step
        recall, charged, extra = self._measure(state, step)
        flag = 0

        if cfg.variant != "no_retrieval":
            current_tops = {}
            for p in self.pivots:
                current_tops[p] = self.pivot_top_set(step, p)
                overlap = len(current_tops[p] & state.k_base[p]) / self.l_base_int
                state.buffers[p].append(overlap)
                state.buffer_steps[p].append(step)

            for p in self.pivots:
                if cfg.eval_every_step:
                    ready = len(state.buffers[p]) >= cfg.window
                else:
                    ready = step % cfg.window == 0
                if not ready:
                    continue
                values = state.buffers[p][-cfg.window :]
                fired = self.drift_check(values, cfg.tau_drift)
                if fired:
                    flag = 1
                    fetches = []
                    fetched_entries = 0
                    for s in self.satellites_of[p]:
                        fetched = self._top_set(step, p, self.effective_length(s))
                        fetches.append((s, tuple(sorted(fetched))))
                        fetched_entries += len(fetched)
                    transfer_bytes = (
                        fetched_entries * self.trace.manifest.bytes_per_kv_entry
                    )
                    state.cumulative_bytes += transfer_bytes
                    completion = max(
                        step + cfg.update_delay_steps,
                        ceil(state.cumulative_bytes / cfg.transfer_bandwidth),
                    )
                    for s, idx in fetches:
                        state.pending.append(
                            _Transfer(
                                completion_step=completion,
                                order=state._order_counter,
                                satellite=s,
                                indices=frozenset(idx),
                            )
                        )
                        state._order_counter += 1
                    state.events.append(
                        RetrievalRecord(
                            trigger_step=step,
                            pivot=p,
                            completion_step=completion,
                            transfer_bytes=transfer_bytes,
                            fetches=tuple(fetches),
                        )
                    )
                    state.k_base[p] = current_tops[p]
                if fired or not cfg.eval_every_step:
                    state.buffers[p] = []
                    state.buffer_steps[p] = []

        return StepRow(
            step=step,
            recall=recall,
            gpu_entries=charged,
            extra_entries=extra,
            bytes_in_flight=state.bytes_in_flight(step),
            cumulative_bytes=state.cumulative_bytes,
            retrieval_flag=flag,
        )

    def run(self) -> EngineRun:
        m = self.trace.manifest
        state = self.prefill_init()
        recall, charged, extra = self._measure(state, 0)
        rows = [
            StepRow(
                step=0,
                recall=recall,
                gpu_entries=charged,
                extra_entries=extra,
                bytes_in_flight=0,
                cumulative_bytes=0,
                retrieval_flag=0,
            )
        ]
        for step in range(1, m.decode_steps + 1):
            rows.append(self.decode_step(state, step))
        final_gpu = {}
        for head_id in self.heads:
            view = self.gpu_view(state, head_id, m.decode_steps)
            L = m.prefill_len
            members = set(range(L, L + m.decode_steps))
            members.update(range(min(self.config.sink_count, L)))
            members.update(
                range(max(0, L + m.decode_steps - self.config.recency_window), L)
            )
            if head_id in self.full:
                members.update(range(L))
            else:
                members.update(state.dynamic[head_id])
            assert all(p in view for p in members)
            final_gpu[head_id] = frozenset(members)
        report = SimulationReport(
            policy=self.config.variant,
            trace_sha256=trace_fingerprint(self.trace),
            num_layers=m.num_layers,
            heads_per_layer=m.heads_per_layer,
            prefill_len=m.prefill_len,
            decode_steps=m.decode_steps,
            budget_ceiling=self.plan.budget_ceiling,
            update_delay_steps=self.config.update_delay_steps,
            rows=tuple(rows),
            events=tuple(state.events),
        )
        return EngineRun(report=report, final_gpu=final_gpu, state=state)


def run_simulation(
    trace: AttentionTrace,
    taxonomy: TaxonomyResult,
    plan: BudgetPlan,
    config: EngineConfig = EngineConfig(),
) -> EngineRun:
    return CacheEngine(trace, taxonomy, plan, config).run()

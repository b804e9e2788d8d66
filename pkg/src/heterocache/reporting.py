"""Simulation report containers and their JSON/CSV forms.

A report is the full record of one policy replayed over one trace: a per-step
time series, the retrieval events (if the policy retrieves), and aggregate
roll-ups. CSV carries only the time series, one row per step; JSON carries
everything and round-trips exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

HeadId = tuple  # (layer, head)

CSV_COLUMNS = ("step", "policy", "recall", "gpu_entries", "bytes_in_flight", "retrieval_flag")


class ReportError(ValueError):
    """Malformed report payloads."""


@dataclass(frozen=True)
class StepRow:
    step: int
    recall: float
    gpu_entries: int  # entries charged against the budget
    extra_entries: int  # sink/recency/append overhead on top of the charged set
    bytes_in_flight: int
    cumulative_bytes: int
    retrieval_flag: int

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "recall": self.recall,
            "gpu_entries": self.gpu_entries,
            "extra_entries": self.extra_entries,
            "bytes_in_flight": self.bytes_in_flight,
            "cumulative_bytes": self.cumulative_bytes,
            "retrieval_flag": self.retrieval_flag,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "StepRow":
        return cls(
            step=int(d["step"]),
            recall=float(d["recall"]),
            gpu_entries=int(d["gpu_entries"]),
            extra_entries=int(d["extra_entries"]),
            bytes_in_flight=int(d["bytes_in_flight"]),
            cumulative_bytes=int(d["cumulative_bytes"]),
            retrieval_flag=int(d["retrieval_flag"]),
        )


@dataclass(frozen=True)
class RetrievalRecord:
    trigger_step: int
    pivot: HeadId
    completion_step: int
    transfer_bytes: int
    fetches: tuple  # ((satellite HeadId, sorted index tuple), ...)

    def to_json_dict(self) -> dict:
        return {
            "trigger_step": self.trigger_step,
            "pivot": list(self.pivot),
            "completion_step": self.completion_step,
            "transfer_bytes": self.transfer_bytes,
            "fetches": [
                {"satellite": list(s), "indices": list(idx)} for s, idx in self.fetches
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RetrievalRecord":
        return cls(
            trigger_step=int(d["trigger_step"]),
            pivot=tuple(int(x) for x in d["pivot"]),
            completion_step=int(d["completion_step"]),
            transfer_bytes=int(d["transfer_bytes"]),
            fetches=tuple(
                (
                    tuple(int(x) for x in e["satellite"]),
                    tuple(int(i) for i in e["indices"]),
                )
                for e in d["fetches"]
            ),
        )


@dataclass(frozen=True)
class SimulationReport:
    policy: str
    trace_sha256: str
    num_layers: int
    heads_per_layer: int
    prefill_len: int
    decode_steps: int
    budget_ceiling: float
    update_delay_steps: int
    rows: tuple  # StepRow, one per step 0..decode_steps
    events: tuple = ()  # RetrievalRecord, in trigger order

    # ---- aggregates ----

    def mean_recall(self) -> float:
        return sum(r.recall for r in self.rows) / len(self.rows)

    def min_recall(self) -> float:
        return min(r.recall for r in self.rows)

    def peak_gpu_entries(self) -> int:
        return max(r.gpu_entries for r in self.rows)

    def peak_total_entries(self) -> int:
        return max(r.gpu_entries + r.extra_entries for r in self.rows)

    def total_transfer_bytes(self) -> int:
        return self.rows[-1].cumulative_bytes if self.rows else 0

    def retrieval_steps(self) -> list:
        return [r.step for r in self.rows if r.retrieval_flag]

    def exposed_transfer_steps(self) -> int:
        """Decode steps spent waiting beyond the modeled update delay."""
        return sum(
            max(0, e.completion_step - (e.trigger_step + self.update_delay_steps))
            for e in self.events
        )

    def hidden_event_count(self) -> int:
        return sum(
            1
            for e in self.events
            if e.completion_step <= e.trigger_step + self.update_delay_steps
        )

    def aggregates(self) -> dict:
        return {
            "mean_recall": self.mean_recall(),
            "min_recall": self.min_recall(),
            "peak_gpu_entries": self.peak_gpu_entries(),
            "peak_total_entries": self.peak_total_entries(),
            "total_transfer_bytes": self.total_transfer_bytes(),
            "retrieval_events": len(self.events),
            "hidden_events": self.hidden_event_count(),
            "exposed_transfer_steps": self.exposed_transfer_steps(),
        }

    # ---- serialization ----

    def to_json_dict(self) -> dict:
        return {
            "policy": self.policy,
            "trace_sha256": self.trace_sha256,
            "num_layers": self.num_layers,
            "heads_per_layer": self.heads_per_layer,
            "prefill_len": self.prefill_len,
            "decode_steps": self.decode_steps,
            "budget_ceiling": self.budget_ceiling,
            "update_delay_steps": self.update_delay_steps,
            "rows": [r.to_json_dict() for r in self.rows],
            "events": [e.to_json_dict() for e in self.events],
            "aggregates": self.aggregates(),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "SimulationReport":
        try:
            report = cls(
                policy=str(payload["policy"]),
                trace_sha256=str(payload["trace_sha256"]),
                num_layers=int(payload["num_layers"]),
                heads_per_layer=int(payload["heads_per_layer"]),
                prefill_len=int(payload["prefill_len"]),
                decode_steps=int(payload["decode_steps"]),
                budget_ceiling=float(payload["budget_ceiling"]),
                update_delay_steps=int(payload["update_delay_steps"]),
                rows=tuple(StepRow.from_json_dict(r) for r in payload["rows"]),
                events=tuple(
                    RetrievalRecord.from_json_dict(e) for e in payload["events"]
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"malformed report payload: {exc}") from exc
        if len(report.rows) != report.decode_steps + 1:
            raise ReportError(
                f"report must carry {report.decode_steps + 1} rows, "
                f"got {len(report.rows)}"
            )
        return report

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [
                    r.step,
                    self.policy,
                    f"{r.recall:.10f}",
                    r.gpu_entries,
                    r.bytes_in_flight,
                    r.retrieval_flag,
                ]
            )
        return buf.getvalue()

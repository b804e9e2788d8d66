"""Policy evaluation harness.

Replays one trace under several cache policies and rolls the results into
comparable reports. The accuracy proxy throughout is attention-mass recall:
the fraction of each step's recorded attention mass whose positions were
resident on the GPU, averaged over heads. Policies are only comparable when
they were given the same entry budget and the same trace bytes; compare()
refuses anything else.

Policies:
  full_oracle     keeps everything (upper bound, exempt from budget checks)
  static_topk     per-head prefill top-k, frozen for the whole decode
  sink_window     first sink_count positions plus a sliding recency window
  heterocache     role-aware plan with drift-triggered retrieval; variants
                  no_allocation (uniform lengths) and no_retrieval (static)
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor
from typing import Optional

from .budget import BudgetConfig, BudgetPlan, plan_budget
from .profiling import ProfileConfig, TaxonomyResult, run_taxonomy
from .reporting import SimulationReport, StepRow
from .trace import PAD_INDEX, AttentionTrace, trace_fingerprint

HETEROCACHE_VARIANTS = ("heterocache", "no_allocation", "no_retrieval")
POLICY_NAMES = ("full_oracle", "static_topk", "sink_window") + HETEROCACHE_VARIANTS


class EvaluationError(ValueError):
    """Bad policy parameters or incomparable runs."""


class BudgetMismatchError(EvaluationError):
    """Policies given different entry budgets must not be compared."""


def attention_recall(cached, pairs) -> float:
    """Share of recorded attention mass covered by the cached set.

    cached is anything supporting membership tests on positions. Padding
    entries are skipped; a row with no recorded mass counts as fully covered.
    """
    total = 0.0
    hit = 0.0
    for idx, score in pairs:
        i = int(idx)
        if i == PAD_INDEX:
            continue
        s = float(score)
        total += s
        if i in cached:
            hit += s
    if total == 0.0:
        return 1.0
    return hit / total


@dataclass(frozen=True)
class PolicySpec:
    """A named policy with its budget parameters.

    rho is the target fraction of the uncompressed prefill cache and applies
    to every policy except full_oracle. sink_window defaults its window to
    floor(rho * prefill_len) - sink_count so its budget matches the others.
    """

    name: str
    rho: float = 0.5
    sink_count: int = 4
    window: Optional[int] = None

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise EvaluationError(
                f"unknown policy {self.name!r}; expected one of {POLICY_NAMES}"
            )
        if self.name != "full_oracle" and not 0.0 < self.rho <= 1.0:
            raise EvaluationError(f"rho must be in (0, 1], got {self.rho}")
        if self.window is not None and self.window < 0:
            raise EvaluationError(f"window must be nonnegative, got {self.window}")

    def effective_window(self, prefill_len: int) -> int:
        if self.window is not None:
            return self.window
        w = floor(self.rho * prefill_len) - self.sink_count
        if w < 0:
            raise EvaluationError(
                f"sink_count {self.sink_count} exceeds the budget "
                f"floor(rho * L) = {floor(self.rho * prefill_len)}"
            )
        return w

    def budget_ceiling(self, num_heads: int, prefill_len: int) -> float:
        if self.name == "full_oracle":
            return float(num_heads * prefill_len)
        if self.name == "sink_window":
            per_head = min(self.sink_count + self.effective_window(prefill_len), prefill_len)
            return float(num_heads * per_head)
        return self.rho * num_heads * prefill_len


def parse_policy(name: str, rho: float, sink_count: int = 4, window: Optional[int] = None) -> PolicySpec:
    return PolicySpec(name=name, rho=rho, sink_count=sink_count, window=window)


def _static_rows(trace, policy_name, per_head_base, sink_count, recency_window, budget_ceiling):
    """Time series for policies whose per-head sets never change."""
    from .engine import CacheView  # local import; engine imports this module

    m = trace.manifest
    heads = [
        (layer, head)
        for layer in range(m.num_layers)
        for head in range(m.heads_per_layer)
    ]
    charged = sum(
        m.prefill_len if per_head_base[h] is None else len(per_head_base[h])
        for h in heads
    )
    rows = []
    for t in range(m.decode_steps + 1):
        recalls = []
        total_size = 0
        for h in heads:
            view = CacheView(
                prefill_len=m.prefill_len,
                step=t,
                base=per_head_base[h],
                sink_count=sink_count,
                recency_window=recency_window,
            )
            layer, head = h
            pairs = zip(trace.indices[t, layer, head], trace.scores[t, layer, head])
            recalls.append(attention_recall(view, pairs))
            total_size += view.size()
        rows.append(
            StepRow(
                step=t,
                recall=sum(recalls) / len(recalls),
                gpu_entries=charged,
                extra_entries=total_size - charged,
                bytes_in_flight=0,
                cumulative_bytes=0,
                retrieval_flag=0,
            )
        )
    return SimulationReport(
        policy=policy_name,
        trace_sha256=trace_fingerprint(trace),
        num_layers=m.num_layers,
        heads_per_layer=m.heads_per_layer,
        prefill_len=m.prefill_len,
        decode_steps=m.decode_steps,
        budget_ceiling=budget_ceiling,
        update_delay_steps=0,
        rows=tuple(rows),
        events=(),
    )


def run_policy(
    trace: AttentionTrace,
    policy: PolicySpec,
    *,
    taxonomy: Optional[TaxonomyResult] = None,
    plan: Optional[BudgetPlan] = None,
    engine_config=None,
    profile_config: Optional[ProfileConfig] = None,
    budget_config: Optional[BudgetConfig] = None,
    calibration_traces=None,
) -> SimulationReport:
    """Replay one policy over one trace and return its report.

    The heterocache family needs a taxonomy and a plan; when absent they are
    derived from calibration_traces (default: the evaluation trace itself,
    which is the self-calibrated setting).
    """
    from . import engine as engine_mod

    m = trace.manifest
    num_heads = m.num_layers * m.heads_per_layer
    heads = [
        (layer, head)
        for layer in range(m.num_layers)
        for head in range(m.heads_per_layer)
    ]

    if policy.name == "full_oracle":
        base = {h: None for h in heads}
        return _static_rows(
            trace, policy.name, base, 0, 0, policy.budget_ceiling(num_heads, m.prefill_len)
        )

    if policy.name == "static_topk":
        from .metrics import top_k_indices

        k = floor(policy.rho * m.prefill_len)
        if k < 1:
            raise EvaluationError(f"rho {policy.rho} leaves no budget for static_topk")
        base = {}
        for layer, head in heads:
            pairs = zip(trace.indices[0, layer, head], trace.scores[0, layer, head])
            base[(layer, head)] = top_k_indices(list(pairs), k)
        cfg = engine_config or engine_mod.EngineConfig()
        return _static_rows(
            trace,
            policy.name,
            base,
            cfg.sink_count,
            cfg.recency_window,
            policy.budget_ceiling(num_heads, m.prefill_len),
        )

    if policy.name == "sink_window":
        window = policy.effective_window(m.prefill_len)
        base = {h: frozenset() for h in heads}
        return _static_rows(
            trace,
            policy.name,
            base,
            policy.sink_count,
            window,
            policy.budget_ceiling(num_heads, m.prefill_len),
        )

    # heterocache family
    cfg = engine_config or engine_mod.EngineConfig()
    if policy.name != cfg.variant:
        cfg = engine_mod.EngineConfig(
            tau_drift=cfg.tau_drift,
            window=cfg.window,
            transfer_bandwidth=cfg.transfer_bandwidth,
            update_delay_steps=cfg.update_delay_steps,
            sink_count=cfg.sink_count,
            recency_window=cfg.recency_window,
            variant=policy.name,
            eval_every_step=cfg.eval_every_step,
        )
    if taxonomy is None:
        calib = list(calibration_traces) if calibration_traces else [trace]
        taxonomy = run_taxonomy(calib, profile_config or ProfileConfig())
    if plan is None:
        bcfg = budget_config or BudgetConfig(rho=policy.rho)
        if bcfg.rho != policy.rho:
            raise EvaluationError(
                f"budget config rho {bcfg.rho} disagrees with policy rho {policy.rho}"
            )
        plan = plan_budget(taxonomy, bcfg, m.prefill_len)
    run = engine_mod.run_simulation(trace, taxonomy, plan, cfg)
    return run.report


def run_policies(
    trace: AttentionTrace,
    policies,
    **kwargs,
) -> list:
    """Run several policies on one trace, enforcing comparable budgets."""
    specs = list(policies)
    m = trace.manifest
    num_heads = m.num_layers * m.heads_per_layer
    ceilings = {
        spec.name: spec.budget_ceiling(num_heads, m.prefill_len)
        for spec in specs
        if spec.name != "full_oracle"
    }
    if ceilings:
        values = sorted(ceilings.values())
        # One entry per head of rounding slack is tolerated (sink_window's
        # integer window cannot always hit rho * L exactly).
        if values[-1] - values[0] > num_heads + 1e-6:
            raise BudgetMismatchError(
                f"policy budgets differ beyond rounding slack: {ceilings}"
            )
    return [run_policy(trace, spec, **kwargs) for spec in specs]


def compare(reports) -> dict:
    """Merge reports into one comparison table.

    Refuses to compare runs over different traces or, among budgeted
    policies, different entry budgets.
    """
    reports = list(reports)
    if not reports:
        raise EvaluationError("nothing to compare")
    names = [r.policy for r in reports]
    if len(set(names)) != len(names):
        raise EvaluationError(f"duplicate policy names: {names}")
    sha = {r.trace_sha256 for r in reports}
    if len(sha) != 1:
        raise EvaluationError("reports come from different traces")
    budgeted = [r for r in reports if r.policy != "full_oracle"]
    if budgeted:
        num_heads = budgeted[0].num_layers * budgeted[0].heads_per_layer
        ceilings = sorted(r.budget_ceiling for r in budgeted)
        if ceilings[-1] - ceilings[0] > num_heads + 1e-6:
            raise BudgetMismatchError(
                "reports use different entry budgets: "
                + ", ".join(f"{r.policy}={r.budget_ceiling}" for r in budgeted)
            )
    ordered = sorted(reports, key=lambda r: r.policy)
    table = []
    for r in ordered:
        agg = r.aggregates()
        table.append(
            {
                "policy": r.policy,
                "mean_recall": agg["mean_recall"],
                "min_recall": agg["min_recall"],
                "peak_gpu_entries": agg["peak_gpu_entries"],
                "total_transfer_bytes": agg["total_transfer_bytes"],
                "retrieval_events": agg["retrieval_events"],
                "exposed_transfer_steps": agg["exposed_transfer_steps"],
                "budget_ceiling": r.budget_ceiling,
            }
        )
    baseline = {row["policy"]: row["mean_recall"] for row in table}
    deltas = {}
    if "heterocache" in baseline:
        for name, value in baseline.items():
            if name != "heterocache":
                deltas[name] = baseline["heterocache"] - value
    return {
        "trace_sha256": sha.pop(),
        "policies": table,
        "mean_recall_delta_vs_heterocache": deltas,
    }


def comparison_csv(comparison: dict) -> str:
    import csv
    import io

    columns = (
        "policy",
        "mean_recall",
        "min_recall",
        "peak_gpu_entries",
        "total_transfer_bytes",
        "retrieval_events",
        "exposed_transfer_steps",
        "budget_ceiling",
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in comparison["policies"]:
        writer.writerow([row[c] for c in columns])
    return buf.getvalue()

"""Command-line front end.

Subcommands cover the full pipeline:

  gen-trace   synthesize a trace file from an archetype config
  profile     score heads and write the role taxonomy
  plan        turn a taxonomy into per-head cache lengths
  simulate    replay one trace under one or more policies
  compare     merge existing report files into one comparison

Every error is reported as a single JSON line on stderr. Exit codes: 0 on
success, 2 for configuration problems, 3 for malformed input files, 4 when
the requested budget is infeasible.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from .budget import (
    BudgetConfig,
    BudgetError,
    BudgetPlan,
    InfeasibleBudgetError,
    plan_budget,
)
from .engine import EngineConfig, EngineError, InfeasibleStateError
from .evaluation import (
    EvaluationError,
    PolicySpec,
    compare as compare_reports,
    comparison_csv,
    run_policies,
)
from .metrics import layer_similarity_matrix
from .profiling import ProfileConfig, TaxonomyError, TaxonomyResult, run_taxonomy
from .reporting import ReportError, SimulationReport
from .synthetic import SynthSpecError, generate_synthetic, synth_spec_from_json
from .trace import (
    TraceError,
    TraceFormatError,
    TraceInvariantError,
    read_trace,
    trace_fingerprint,
    write_trace,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_INFEASIBLE = 4


class ConfigError(ValueError):
    """Anything wrong with the run configuration file or flags."""


class InputPayloadError(ValueError):
    """An input artifact (trace, taxonomy, report) failed to parse."""


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_SECTIONS = {
    "synthetic",
    "profile",
    "budget",
    "engine",
    "policies",
    "sink_window",
}

_PROFILE_KEYS = {"tau_stable", "tau_sim", "profiling_topk", "adjacency_step"}
_BUDGET_KEYS = {"rho", "epsilon", "min_length", "rounding"}
_ENGINE_KEYS = {
    "tau_drift",
    "window",
    "transfer_bandwidth",
    "update_delay_steps",
    "sink_count",
    "recency_window",
    "eval_every_step",
}
_SINK_WINDOW_KEYS = {"sink_count", "window"}


def _load_config(path: str) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(payload) - _SECTIONS
    if unknown:
        raise ConfigError(
            f"unknown config sections {sorted(unknown)}; expected {sorted(_SECTIONS)}"
        )
    return payload


def _check_keys(section: dict, allowed: set, name: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(
            f"unknown keys {sorted(unknown)} in config section {name!r}; "
            f"expected {sorted(allowed)}"
        )


def _profile_config(config: dict) -> ProfileConfig:
    section = config.get("profile", {})
    _check_keys(section, _PROFILE_KEYS, "profile")
    try:
        return ProfileConfig(
            tau_stable=float(section.get("tau_stable", 0.5)),
            tau_sim=float(section.get("tau_sim", 0.5)),
            profiling_topk=(
                None
                if section.get("profiling_topk") is None
                else int(section["profiling_topk"])
            ),
            adjacency_step=(
                None
                if section.get("adjacency_step") is None
                else int(section["adjacency_step"])
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad profile section: {exc}") from exc


def _budget_config(config: dict) -> BudgetConfig:
    section = config.get("budget", {})
    _check_keys(section, _BUDGET_KEYS, "budget")
    try:
        return BudgetConfig(
            rho=float(section.get("rho", 0.5)),
            epsilon=float(section.get("epsilon", 1e-6)),
            min_length=int(section.get("min_length", 16)),
            rounding=str(section.get("rounding", "largest_remainder")),
        )
    except BudgetError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad budget section: {exc}") from exc


def _engine_config(config: dict, variant: str = "heterocache") -> EngineConfig:
    section = config.get("engine", {})
    _check_keys(section, _ENGINE_KEYS, "engine")
    try:
        return EngineConfig(
            tau_drift=float(section.get("tau_drift", 0.5)),
            window=int(section.get("window", 8)),
            transfer_bandwidth=int(section.get("transfer_bandwidth", 1 << 30)),
            update_delay_steps=int(section.get("update_delay_steps", 1)),
            sink_count=int(section.get("sink_count", 4)),
            recency_window=int(section.get("recency_window", 8)),
            variant=variant,
            eval_every_step=bool(section.get("eval_every_step", False)),
        )
    except EngineError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad engine section: {exc}") from exc


def _policy_specs(config: dict, names, rho: float) -> list:
    section = config.get("sink_window", {})
    _check_keys(section, _SINK_WINDOW_KEYS, "sink_window")
    sink_count = int(section.get("sink_count", 4))
    window = section.get("window")
    specs = []
    for name in names:
        specs.append(
            PolicySpec(
                name=name,
                rho=rho,
                sink_count=sink_count,
                window=None if window is None else int(window),
            )
        )
    return specs


# ---------------------------------------------------------------------------
# IO helpers
# ---------------------------------------------------------------------------


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _read_trace_file(path: str):
    try:
        return read_trace(Path(path))
    except TraceError as exc:
        raise InputPayloadError(f"trace {path}: {exc}") from exc


def _read_json_file(path: str, kind: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputPayloadError(f"cannot read {kind} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputPayloadError(f"{kind} {path} is not valid JSON: {exc}") from exc


def _load_taxonomy(path: str) -> TaxonomyResult:
    payload = _read_json_file(path, "taxonomy")
    try:
        return TaxonomyResult.from_json_dict(payload)
    except TaxonomyError as exc:
        raise InputPayloadError(f"taxonomy {path}: {exc}") from exc


def _load_report(path: str) -> SimulationReport:
    payload = _read_json_file(path, "report")
    try:
        return SimulationReport.from_json_dict(payload)
    except ReportError as exc:
        raise InputPayloadError(f"report {path}: {exc}") from exc


def _fail(exit_code: int, kind: str, exc: Exception) -> None:
    line = json.dumps({"error": kind, "message": str(exc)}, sort_keys=True)
    click.echo(line, err=True)
    sys.exit(exit_code)


def _guard(body) -> None:
    """Run a command body, translating library errors to exit codes."""
    try:
        body()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, "config", exc)
    except InputPayloadError as exc:
        _fail(EXIT_INPUT, "input_format", exc)
    except (TraceFormatError, TraceInvariantError) as exc:
        _fail(EXIT_INPUT, "input_format", exc)
    except (InfeasibleBudgetError, InfeasibleStateError) as exc:
        _fail(EXIT_INFEASIBLE, "infeasible_budget", exc)
    except (
        SynthSpecError,
        TaxonomyError,
        BudgetError,
        EngineError,
        EvaluationError,
    ) as exc:
        _fail(EXIT_CONFIG, "config", exc)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@click.group()
def main() -> None:
    """Trace-driven simulator for heterogeneous KV-cache compression."""


@main.command("gen-trace")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--truth", "truth_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the generator's ground-truth roles as JSON.")
def gen_trace(config_path, seed, out_path, truth_path):
    """Synthesize a trace file from the config's synthetic section."""

    def body():
        config = _load_config(config_path)
        if "synthetic" not in config:
            raise ConfigError("config has no 'synthetic' section")
        section = dict(config["synthetic"])
        if seed is not None:
            section["seed"] = seed
        spec = synth_spec_from_json(section)
        trace, truth = generate_synthetic(spec)
        out = Path(out_path)
        if out.parent and not out.parent.exists():
            out.parent.mkdir(parents=True, exist_ok=True)
        n = write_trace(trace, out)
        if truth_path is not None:
            _write_text_atomic(Path(truth_path), _dump_json(truth.to_json_dict()))
        click.echo(
            json.dumps(
                {
                    "trace": str(out),
                    "bytes": n,
                    "sha256": trace_fingerprint(trace),
                    "seed": spec.seed,
                },
                sort_keys=True,
            )
        )

    _guard(body)


@main.command("profile")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trace", "trace_paths", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--layer-similarity-step", type=int, default=None,
              help="Also write the cross-layer overlap matrix at this step.")
def profile_cmd(config_path, trace_paths, out_dir, layer_similarity_step):
    """Score heads over calibration traces and write the taxonomy."""

    def body():
        config = _load_config(config_path)
        pcfg = _profile_config(config)
        traces = [_read_trace_file(p) for p in trace_paths]
        taxonomy = run_taxonomy(traces, pcfg)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_text_atomic(out / "taxonomy.json", _dump_json(taxonomy.to_json_dict()))
        if layer_similarity_step is not None:
            matrix = layer_similarity_matrix(
                traces[0],
                layer_similarity_step,
                pcfg.effective_topk(traces[0].manifest.prefill_len),
            )
            lines = [",".join(f"layer_{j}" for j in range(matrix.shape[1]))]
            for row in matrix:
                lines.append(",".join(f"{v:.10f}" for v in row))
            _write_text_atomic(out / "layer_similarity.csv", "\n".join(lines) + "\n")
        click.echo(json.dumps(taxonomy.role_counts(), sort_keys=True))

    _guard(body)


@main.command("plan")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--taxonomy", "taxonomy_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trace", "trace_paths", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def plan_cmd(config_path, taxonomy_path, trace_paths, out_dir):
    """Allocate per-head cache lengths for a profiled taxonomy."""

    def body():
        config = _load_config(config_path)
        bcfg = _budget_config(config)
        taxonomy = _load_taxonomy(taxonomy_path)
        trace = _read_trace_file(trace_paths[0])
        plan = plan_budget(taxonomy, bcfg, trace.manifest.prefill_len)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_text_atomic(out / "plan.json", _dump_json(plan.to_json_dict()))
        click.echo(
            json.dumps(
                {
                    "l_base": plan.l_base,
                    "l_base_int": plan.l_base_int,
                    "planned_gpu_entries": plan.planned_gpu_entries,
                    "budget_ceiling": plan.budget_ceiling,
                },
                sort_keys=True,
            )
        )

    _guard(body)


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trace", "trace_paths", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--taxonomy", "taxonomy_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--policy", "policy_names", multiple=True,
              help="Policy to run (repeatable); overrides the config list.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def simulate_cmd(config_path, trace_paths, taxonomy_path, policy_names, out_dir):
    """Replay the trace under each policy and write reports."""

    def body():
        config = _load_config(config_path)
        pcfg = _profile_config(config)
        bcfg = _budget_config(config)
        trace = _read_trace_file(trace_paths[0])
        names = list(policy_names) or list(config.get("policies", ["heterocache"]))
        if not isinstance(names, list) or not names:
            raise ConfigError("no policies requested")
        specs = _policy_specs(config, names, bcfg.rho)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        taxonomy = None
        hetero = [s for s in specs if s.name not in ("full_oracle", "static_topk", "sink_window")]
        if hetero:
            if taxonomy_path is not None:
                taxonomy = _load_taxonomy(taxonomy_path)
            else:
                taxonomy = run_taxonomy([trace], pcfg)
                _write_text_atomic(
                    out / "taxonomy.json", _dump_json(taxonomy.to_json_dict())
                )
            plan = plan_budget(taxonomy, bcfg, trace.manifest.prefill_len)
            _write_text_atomic(out / "plan.json", _dump_json(plan.to_json_dict()))
        else:
            plan = None

        reports = run_policies(
            trace,
            specs,
            taxonomy=taxonomy,
            plan=plan,
            engine_config=_engine_config(config),
            budget_config=bcfg,
        )
        summary = {}
        for report in reports:
            stem = f"report_{report.policy}"
            _write_text_atomic(out / f"{stem}.json", _dump_json(report.to_json_dict()))
            _write_text_atomic(out / f"{stem}.csv", report.to_csv())
            summary[report.policy] = report.aggregates()
        if len(reports) > 1:
            comparison = compare_reports(reports)
            _write_text_atomic(out / "comparison.json", _dump_json(comparison))
            _write_text_atomic(out / "comparison.csv", comparison_csv(comparison))
        click.echo(json.dumps(summary, sort_keys=True))

    _guard(body)


@main.command("compare")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
def compare_cmd(out_dir, reports):
    """Merge previously written report JSON files into one comparison."""

    def body():
        loaded = [_load_report(p) for p in reports]
        comparison = compare_reports(loaded)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_text_atomic(out / "comparison.json", _dump_json(comparison))
        _write_text_atomic(out / "comparison.csv", comparison_csv(comparison))
        click.echo(
            json.dumps(
                {row["policy"]: row["mean_recall"] for row in comparison["policies"]},
                sort_keys=True,
            )
        )

    _guard(body)


if __name__ == "__main__":
    main()

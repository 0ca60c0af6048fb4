"""Replay labeled tool-call traces through the gate (or a pass-through
baseline), count write-call precision/recall, and estimate pass^k over
repeated task trials."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from .extraction import ObservableState, ToolCall
from .gate import Decision, GateConfig, GateEngine, SessionBudget
from .policy import PolicyPackage
from .solver import SolverPool

TRACE_FORMAT = 1


class MalformedTrace(Exception):
    def __init__(self, line: int, cause: str):
        self.line = line
        self.cause = cause
        super().__init__(f"line {line}: {cause}")


class InsufficientTrials(Exception):
    pass


@dataclass(frozen=True)
class TraceEvent:
    task_id: str
    trial_index: int
    turn: int
    tool_call: ToolCall
    state: ObservableState
    label: str | None  # valid | invalid, write calls only
    expected: bool
    line: int


@dataclass(frozen=True)
class TaskTrial:
    task_id: str
    trial_index: int
    success: bool


@dataclass(frozen=True)
class MetricsReport:
    mode: str  # gated | baseline
    counts: Mapping[str, int]  # expected, made_valid, made_invalid, blocked
    precision: float | None
    recall: float | None
    pass_hat: Mapping[int, float]
    trials: tuple[TaskTrial, ...]
    k: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "counts": dict(self.counts),
            "precision": self.precision,
            "recall": self.recall,
            "pass_hat_k": {str(k): v for k, v in sorted(self.pass_hat.items())},
            "k": self.k,
            "trials": [
                {"task_id": t.task_id, "trial_index": t.trial_index, "success": t.success}
                for t in self.trials
            ],
        }


def parse_trace(path: str | Path) -> list[TraceEvent]:
    """Parse a JSON Lines trace; the first line is a format header."""
    events: list[TraceEvent] = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MalformedTrace(1, "empty trace file (missing format header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedTrace(1, f"header is not JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("trace_format") != TRACE_FORMAT:
        raise MalformedTrace(1, f"unsupported trace header: {lines[0]!r}")
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(number, f"not JSON: {exc}") from exc
        try:
            call_raw = raw["tool_call"]
            call = ToolCall(
                tool_name=call_raw["tool_name"],
                arguments=call_raw.get("arguments", {}),
                call_id=call_raw.get("call_id", f"line-{number}"),
            )
            state_raw = raw.get("state", {})
            if "data" in state_raw:
                state = ObservableState(
                    data=state_raw["data"], turn_index=state_raw.get("turn_index", 0)
                )
            else:
                state = ObservableState(data=state_raw)
            label = raw.get("label")
            if label is not None and label not in ("valid", "invalid"):
                raise MalformedTrace(number, f"label must be valid|invalid, got {label!r}")
            events.append(
                TraceEvent(
                    task_id=str(raw["task_id"]),
                    trial_index=int(raw["trial_index"]),
                    turn=int(raw.get("turn", 0)),
                    tool_call=call,
                    state=state,
                    label=label,
                    expected=bool(raw.get("expected", False)),
                    line=number,
                )
            )
        except MalformedTrace:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(number, f"bad event: {exc}") from exc
    return events


def _check_labels(events: Sequence[TraceEvent], pkg: PolicyPackage) -> None:
    for event in events:
        schema = pkg.schema_for(event.tool_call.tool_name)
        is_write = schema is not None and schema.write_tool
        if is_write and event.label is None:
            raise MalformedTrace(event.line, "write tool call is missing its label")
        if not is_write and event.label is not None:
            raise MalformedTrace(
                event.line, f"label on a non-write call of {event.tool_call.tool_name}"
            )


def pass_hat_k(trials: Sequence[TaskTrial], k: int) -> float:
    """Unbiased per-task estimator C(c, k) / C(n, k), averaged across tasks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    by_task: dict[str, list[bool]] = {}
    for trial in trials:
        by_task.setdefault(trial.task_id, []).append(trial.success)
    if not by_task:
        raise InsufficientTrials("no trials")
    total = Fraction(0)
    for task_id, outcomes in by_task.items():
        n, c = len(outcomes), sum(outcomes)
        if n < k:
            raise InsufficientTrials(f"task {task_id} has {n} trials, needs {k}")
        total += Fraction(math.comb(c, k), math.comb(n, k))
    return float(total / len(by_task))


def replay(
    trace_path: str | Path,
    pkg: PolicyPackage,
    mode: str,
    pool: SolverPool | None = None,
    *,
    k: int | None = None,
    gate_config: GateConfig | None = None,
) -> MetricsReport:
    """Route every trace event through the gate (gated) or count it as made
    (baseline), then report write-call precision/recall and pass^k.

    A trial succeeds iff every expected write call was made and no invalid
    write call was executed.
    """
    if mode not in ("gated", "baseline"):
        raise ValueError(f"unknown replay mode: {mode}")
    events = parse_trace(trace_path)
    _check_labels(events, pkg)

    engine: GateEngine | None = None
    budgets: dict[tuple[str, int], SessionBudget] = {}
    if mode == "gated":
        if pool is None:
            raise ValueError("gated replay needs a solver pool")
        engine = GateEngine(pkg, pool, gate_config)

    made_valid = made_invalid = blocked = expected_count = 0
    trial_expected: dict[tuple[str, int], int] = {}
    trial_expected_made: dict[tuple[str, int], int] = {}
    trial_invalid_made: dict[tuple[str, int], int] = {}
    seen_trials: list[tuple[str, int]] = []

    for event in events:
        key = (event.task_id, event.trial_index)
        if key not in trial_expected:
            trial_expected[key] = trial_expected_made[key] = trial_invalid_made[key] = 0
            seen_trials.append(key)
        schema = pkg.schema_for(event.tool_call.tool_name)
        is_write = schema is not None and schema.write_tool

        if engine is not None:
            budget = budgets.setdefault(key, SessionBudget(f"{event.task_id}/{event.trial_index}"))
            verdict = engine.check_tool_call(event.tool_call, event.state, budget)
            made = verdict.decision is Decision.ALLOW
        else:
            made = True

        if not is_write:
            continue
        if event.expected:
            expected_count += 1
            trial_expected[key] += 1
        if made:
            if event.label == "valid":
                made_valid += 1
            else:
                made_invalid += 1
            if event.expected:
                trial_expected_made[key] += 1
            if event.label == "invalid":
                trial_invalid_made[key] += 1
        else:
            blocked += 1

    trials = tuple(
        TaskTrial(
            task_id=task,
            trial_index=trial,
            success=(
                trial_expected_made[(task, trial)] == trial_expected[(task, trial)]
                and trial_invalid_made[(task, trial)] == 0
            ),
        )
        for task, trial in seen_trials
    )

    made_total = made_valid + made_invalid
    precision = made_valid / made_total if made_total > 0 else None
    recall = made_valid / expected_count if expected_count > 0 else None

    if k is None:
        per_task: dict[str, int] = {}
        for trial in trials:
            per_task[trial.task_id] = per_task.get(trial.task_id, 0) + 1
        k = min(per_task.values()) if per_task else 1
    pass_hat = {kk: pass_hat_k(trials, kk) for kk in range(1, k + 1)} if trials else {}

    return MetricsReport(
        mode=mode,
        counts={
            "expected": expected_count,
            "made_valid": made_valid,
            "made_invalid": made_invalid,
            "blocked": blocked,
        },
        precision=precision,
        recall=recall,
        pass_hat=pass_hat,
        trials=trials,
        k=k,
    )


@dataclass(frozen=True)
class Comparison:
    report_a: MetricsReport
    report_b: MetricsReport
    decline_a: float | None
    decline_b: float | None

    def to_dict(self) -> dict:
        return {
            "a": self.report_a.to_dict(),
            "b": self.report_b.to_dict(),
            "decline_a": self.decline_a,
            "decline_b": self.decline_b,
        }


def relative_decline(report: MetricsReport) -> float | None:
    """(pass^1 - pass^K) / pass^1 for the report's own K."""
    if not report.pass_hat:
        return None
    first = report.pass_hat[1]
    last = report.pass_hat[report.k]
    if first == 0:
        return None
    return (first - last) / first


def compare(report_a: MetricsReport, report_b: MetricsReport) -> Comparison:
    if report_a.k != report_b.k:
        raise ValueError("reports were computed with different K")
    return Comparison(
        report_a=report_a,
        report_b=report_b,
        decline_a=relative_decline(report_a),
        decline_b=relative_decline(report_b),
    )


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table for one or more replay reports."""
    headers = ["metric"] + [r.mode for r in reports]
    rows = [
        ["expected"] + [str(r.counts["expected"]) for r in reports],
        ["made_valid"] + [str(r.counts["made_valid"]) for r in reports],
        ["made_invalid"] + [str(r.counts["made_invalid"]) for r in reports],
        ["blocked"] + [str(r.counts["blocked"]) for r in reports],
        ["precision"] + [_fmt(r.precision) for r in reports],
        ["recall"] + [_fmt(r.recall) for r in reports],
    ]
    ks = sorted({k for r in reports for k in r.pass_hat})
    for k in ks:
        rows.append([f"pass^{k}"] + [_fmt(r.pass_hat.get(k)) for r in reports])
    rows.append(["pass^k decline"] + [_fmt(relative_decline(r)) for r in reports])
    widths = [
        max(len(str(row[i])) for row in [headers] + rows) for i in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)

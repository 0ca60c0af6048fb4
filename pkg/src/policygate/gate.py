"""Runtime policy gate: build a check script for a proposed tool call, decide
Allow/Block/Error with an SMT solver, explain blocks from unsat cores, and
enforce the bounded retry budget.

The gate never raises out of check_tool_call: every failure mode is a
Verdict, so a crashed solver cannot take the agent loop down with it.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

from .extraction import (
    BindingSet,
    ExtractionError,
    ExtractorConfig,
    ObservableState,
    RemoteExtractorMalformedReply,
    RemoteExtractorUnavailable,
    ToolCall,
    TypeMismatch,
    extract,
)
from .policy import PolicyPackage, ToolSchema
from .smtlib import (
    App,
    Assert,
    CheckSat,
    CheckStatus,
    Const,
    GetUnsatCore,
    Lit,
    RawSmt,
    Script,
    SmtError,
    emit_script,
)
from .solver import (
    CheckOutcome,
    SolverCrashed,
    SolverPool,
    SolverScriptError,
    SolverSpawnError,
    SolverUnavailable,
    minimize_core,
)

BIND_PREFIX = "bind_"
GOAL_PREFIX = "goal_"


class UnknownRuleName(Exception):
    """A core member is neither an encoding rule nor a runtime assertion."""


class Decision(Enum):
    ALLOW = "allow"
    BLOCK = "block"
    ERROR = "error"


class Reason(Enum):
    UNCONDITIONAL_ALLOW = "unconditional_allow"
    SAT = "sat"
    UNSAT = "unsat"
    UNKNOWN_TOOL = "unknown_tool"
    MISSING_REQUIRED = "missing_required"
    SOLVER_UNKNOWN = "solver_unknown"
    SOLVER_FAILURE = "solver_failure"
    TYPE_MISMATCH = "type_mismatch"
    EXTRACTOR_FAILURE = "extractor_failure"
    NOT_ENTAILED = "not_entailed"


_ALLOW_REASONS = {
    Reason.UNCONDITIONAL_ALLOW,
    Reason.SAT,
    # Permissive configurations only (fail-open, unknown_tool=allow):
    Reason.SOLVER_UNKNOWN,
    Reason.UNKNOWN_TOOL,
}


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    reason: Reason
    core: tuple[str, ...] = ()
    explanation: str = ""
    outcome: CheckOutcome | None = None
    attempt: int = 1
    retry_allowed: bool = True

    def __post_init__(self) -> None:
        if self.decision is Decision.ALLOW and self.reason not in _ALLOW_REASONS:
            raise ValueError(f"Allow verdict with reason {self.reason}")
        if (
            self.decision is Decision.BLOCK
            and self.reason is Reason.UNSAT
            and (not self.core or not self.explanation)
        ):
            raise ValueError("Block/unsat verdicts need a nonempty core and explanation")
        if self.attempt < 1:
            raise ValueError("attempt starts at 1")

    def to_dict(self) -> dict:
        return {
            "decision": self.decision.value,
            "reason": self.reason.value,
            "core": list(self.core),
            "explanation": self.explanation,
            "attempt": self.attempt,
            "retry_allowed": self.retry_allowed,
        }


class SessionBudget:
    """Per-session, per-tool blocked-attempt counters with a fixed cap."""

    def __init__(self, session_id: str, max_attempts: int = 3):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.session_id = session_id
        self.max_attempts = max_attempts
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()

    def attempts(self, tool_name: str) -> int:
        with self._lock:
            return self._counters.get(tool_name, 0)

    def next_attempt(self, tool_name: str) -> int:
        with self._lock:
            return self._counters.get(tool_name, 0) + 1

    def note_block(self, tool_name: str) -> bool:
        """Record a Block; returns whether another retry is allowed."""
        with self._lock:
            count = self._counters.get(tool_name, 0) + 1
            self._counters[tool_name] = count
            return count < self.max_attempts

    def note_allow(self, tool_name: str) -> None:
        with self._lock:
            self._counters.pop(tool_name, None)


def note_block_and_escalate(session: SessionBudget, tool_name: str) -> dict:
    """Record a Block against the budget; retry_allowed flips false at the cap."""
    return {"retry_allowed": session.note_block(tool_name)}


@dataclass(frozen=True)
class AuditRecord:
    timestamp: float
    session_id: str
    call_id: str
    tool_name: str
    bindings: Mapping[str, object]
    missing: tuple[str, ...]
    script_sha256: str
    decision: str
    reason: str
    core: tuple[str, ...]
    solver_wall_ms: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "timestamp": self.timestamp,
                "session_id": self.session_id,
                "call_id": self.call_id,
                "tool_name": self.tool_name,
                "bindings": dict(self.bindings),
                "missing": list(self.missing),
                "script_sha256": self.script_sha256,
                "decision": self.decision,
                "reason": self.reason,
                "core": list(self.core),
                "solver_wall_ms": self.solver_wall_ms,
            },
            sort_keys=True,
        )


class JsonlAuditLog:
    """Append-only JSON Lines audit sink; appends are atomic per record."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()

    def append(self, record: AuditRecord) -> None:
        line = record.to_json() + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)


class MemoryAuditLog:
    """In-process audit sink used when no file path is configured."""

    def __init__(self) -> None:
        self.records: list[AuditRecord] = []
        self._lock = threading.Lock()

    def append(self, record: AuditRecord) -> None:
        with self._lock:
            self.records.append(record)


@dataclass(frozen=True)
class GateConfig:
    fail_open: bool = False  # verdict when the solver answers unknown/times out
    semantics: str = "exists"  # exists | forall
    minimize_cores: bool = False
    max_attempts: int = 3
    check_timeout_ms: int | None = None

    def __post_init__(self) -> None:
        if self.semantics not in ("exists", "forall"):
            raise ValueError(f"unknown semantics: {self.semantics}")


# ---------------------------------------------------------------------------
# Script construction


def bind_assertions(schema: ToolSchema, bindings: BindingSet) -> list[Assert]:
    """One named equality assertion per bound variable, in schema order."""
    out = []
    for var in schema.variables:
        if var.name in bindings.bindings:
            value = bindings.bindings[var.name]
            out.append(
                Assert(
                    App("=", (Const(var.name), Lit(value, var.sort))),
                    name=f"{BIND_PREFIX}{var.name}",
                )
            )
    return out


def goal_assertion(schema: ToolSchema, semantics: str = "exists") -> Assert:
    predicate = Const(schema.designated_predicate)
    term = predicate if semantics == "exists" else App("not", (predicate,))
    return Assert(term, name=f"{GOAL_PREFIX}{schema.tool_name}")


def build_check_script(
    pkg: PolicyPackage,
    schema: ToolSchema,
    bindings: BindingSet,
    *,
    semantics: str = "exists",
    request_core: bool = True,
) -> Script:
    """Solver options ++ verbatim encoding ++ bind_* assertions ++ the goal
    assertion of the designated predicate ++ check-sat (++ get-unsat-core).

    Unbound variables receive no assertion and stay existentially free.
    """
    if schema.designated_predicate is None:
        raise ValueError(f"{schema.tool_name} has no designated predicate")
    commands: list = [*pkg.prelude_commands(), RawSmt(pkg.encoding.source_text)]
    commands.extend(bind_assertions(schema, bindings))
    commands.append(goal_assertion(schema, semantics))
    commands.append(CheckSat())
    if request_core:
        commands.append(GetUnsatCore())
    return Script(
        tuple(commands),
        assume_declared=dict(pkg.encoding.declared_constants),
        assume_named=frozenset(pkg.encoding.named_rules),
    )


def core_subset_script(
    pkg: PolicyPackage,
    schema: ToolSchema,
    bindings: BindingSet,
    names: Sequence[str],
    *,
    semantics: str = "exists",
) -> Script:
    """Declarations plus exactly the named assertions; used for core re-checks
    and deletion-based minimization."""
    parts = list(pkg.encoding.declaration_text)
    commands: list = [RawSmt("\n".join(parts))] if parts else []
    suffix: list[Assert] = []
    bind_all = {a.name: a for a in bind_assertions(schema, bindings)}
    goal = goal_assertion(schema, semantics)
    assumed_names = set()
    for name in names:
        if name in pkg.encoding.rule_assert_text:
            commands.append(RawSmt(pkg.encoding.rule_assert_text[name]))
            assumed_names.add(name)
        elif name in bind_all:
            suffix.append(bind_all[name])
        elif name == goal.name:
            suffix.append(goal)
        else:
            raise UnknownRuleName(name)
    commands.extend(suffix)
    commands.append(CheckSat())
    return Script(
        tuple(commands),
        assume_declared=dict(pkg.encoding.declared_constants),
        assume_named=frozenset(assumed_names),
    )


def explain(core: Sequence[str], pkg: PolicyPackage) -> str:
    """Deterministic rendering of an unsat core for an agent retry prompt.

    Separates policy rules from runtime binding assertions (bind_ prefix) and
    the blocked action's requirement (goal_ prefix). Raises UnknownRuleName
    for members outside all three namespaces.
    """
    if not core:
        raise ValueError("explain requires a nonempty core")
    rules: list[str] = []
    binds: list[str] = []
    goals: list[str] = []
    for name in core:
        if name in pkg.encoding.named_rules:
            rules.append(name)
        elif name.startswith(BIND_PREFIX):
            binds.append(name)
        elif name.startswith(GOAL_PREFIX):
            goals.append(name)
        else:
            raise UnknownRuleName(name)
    parts = ["The proposed tool call is incompatible with the policy."]
    if rules:
        parts.append("Violated policy rules: " + ", ".join(rules) + ".")
    if binds:
        observed = ", ".join(f"{b[len(BIND_PREFIX):]} (asserted by {b})" for b in binds)
        parts.append("Conflicting observed values: " + observed + ".")
    if goals:
        parts.append("Blocked requirement: " + ", ".join(goals) + ".")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Engine


class GateEngine:
    """Checks proposed tool calls against one policy package."""

    def __init__(
        self,
        pkg: PolicyPackage,
        pool: SolverPool,
        config: GateConfig | None = None,
        extractor: ExtractorConfig | None = None,
        audit_log: JsonlAuditLog | MemoryAuditLog | None = None,
    ):
        self.pkg = pkg
        self.pool = pool
        self.config = config or GateConfig()
        self.extractor = extractor or ExtractorConfig()
        self.audit_log = audit_log if audit_log is not None else MemoryAuditLog()
        self._session = pool.session(f"{pkg.id}@{pkg.version}", pkg.base_script())

    # -- internals

    def _audit(
        self,
        call: ToolCall,
        session: SessionBudget,
        verdict: Verdict,
        bindings: BindingSet | None,
        script_hash: str,
    ) -> None:
        record = AuditRecord(
            timestamp=time.time(),
            session_id=session.session_id,
            call_id=call.call_id,
            tool_name=call.tool_name,
            bindings=dict(bindings.bindings) if bindings else {},
            missing=bindings.missing if bindings else (),
            script_sha256=script_hash,
            decision=verdict.decision.value,
            reason=verdict.reason.value,
            core=verdict.core,
            solver_wall_ms=verdict.outcome.wall_time_ms if verdict.outcome else 0.0,
        )
        self.audit_log.append(record)

    def _finish(
        self,
        call: ToolCall,
        session: SessionBudget,
        verdict: Verdict,
        bindings: BindingSet | None = None,
        script_hash: str = "",
    ) -> Verdict:
        attempt = session.next_attempt(call.tool_name)
        if verdict.decision is Decision.BLOCK:
            retry = session.note_block(call.tool_name)
            verdict = replace(verdict, attempt=attempt, retry_allowed=retry)
        elif verdict.decision is Decision.ALLOW:
            verdict = replace(verdict, attempt=attempt, retry_allowed=True)
            session.note_allow(call.tool_name)
        else:
            verdict = replace(verdict, attempt=attempt, retry_allowed=True)
        self._audit(call, session, verdict, bindings, script_hash)
        return verdict

    def _minimize(self, schema: ToolSchema, bindings: BindingSet, core: Sequence[str]):
        def recheck(names: Sequence[str]) -> CheckStatus:
            script = core_subset_script(
                self.pkg, schema, bindings, names, semantics=self.config.semantics
            )
            try:
                return self.pool.check(script).response.status
            except (SolverScriptError, SolverCrashed):
                return CheckStatus.UNKNOWN  # keep the member; stay conservative
        return tuple(minimize_core(recheck, list(core)))

    # -- spec surface

    def check_tool_call(
        self, call: ToolCall, state: ObservableState, session: SessionBudget
    ) -> Verdict:
        """Decide one proposed tool call; never raises.

        Empty schemas allow without touching the solver; unknown tools follow
        the package default; missing required variables and solver unknowns
        block under the default fail-closed configuration.
        """
        schema = self.pkg.schema_for(call.tool_name)
        if schema is None:
            if self.pkg.unknown_tool_default == "allow":
                verdict = Verdict(
                    Decision.ALLOW,
                    Reason.UNKNOWN_TOOL,
                    explanation=f"no schema for {call.tool_name}; package default allows",
                )
            else:
                verdict = Verdict(
                    Decision.BLOCK,
                    Reason.UNKNOWN_TOOL,
                    explanation=f"no validation schema for tool {call.tool_name}; "
                    "the package default is to block unknown tools",
                )
            return self._finish(call, session, verdict)

        if schema.empty:
            return self._finish(
                call,
                session,
                Verdict(
                    Decision.ALLOW,
                    Reason.UNCONDITIONAL_ALLOW,
                    explanation=f"{call.tool_name} is unconditionally allowed",
                ),
            )

        try:
            bindings = extract(schema, call, state, self.extractor)
        except TypeMismatch as exc:
            return self._finish(
                call,
                session,
                Verdict(
                    Decision.BLOCK,
                    Reason.TYPE_MISMATCH,
                    explanation=f"extracted value does not fit the policy sort: {exc}",
                ),
            )
        except (RemoteExtractorUnavailable, RemoteExtractorMalformedReply, ExtractionError) as exc:
            return self._finish(
                call,
                session,
                Verdict(
                    Decision.ERROR,
                    Reason.EXTRACTOR_FAILURE,
                    explanation=f"value extraction failed: {exc}",
                ),
            )

        required_missing = sorted(
            set(bindings.missing) & {v.name for v in schema.variables if v.required}
        )
        if required_missing:
            return self._finish(
                call,
                session,
                Verdict(
                    Decision.BLOCK,
                    Reason.MISSING_REQUIRED,
                    explanation="required policy variables could not be extracted: "
                    + ", ".join(required_missing),
                ),
                bindings,
            )

        script = build_check_script(
            self.pkg, schema, bindings, semantics=self.config.semantics
        )
        try:
            script_hash = hashlib.sha256(emit_script(script).encode()).hexdigest()
        except SmtError as exc:
            return self._finish(
                call,
                session,
                Verdict(
                    Decision.ERROR,
                    Reason.SOLVER_FAILURE,
                    explanation=f"could not construct the check script: {exc}",
                ),
                bindings,
            )

        suffix = [*bind_assertions(schema, bindings), goal_assertion(schema, self.config.semantics)]
        try:
            outcome = self._session.check(suffix, timeout_ms=self.config.check_timeout_ms)
        except (SolverScriptError, SolverSpawnError, SolverCrashed, SolverUnavailable) as exc:
            return self._finish(
                call,
                session,
                Verdict(
                    Decision.ERROR,
                    Reason.SOLVER_FAILURE,
                    explanation=f"solver failure: {exc}",
                ),
                bindings,
                script_hash,
            )

        verdict = self._interpret(schema, bindings, outcome)
        return self._finish(call, session, verdict, bindings, script_hash)

    def _interpret(
        self, schema: ToolSchema, bindings: BindingSet, outcome: CheckOutcome
    ) -> Verdict:
        status = outcome.response.status
        exists = self.config.semantics == "exists"
        if status is CheckStatus.UNKNOWN:
            decision = Decision.ALLOW if self.config.fail_open else Decision.BLOCK
            detail = "timed out" if outcome.timed_out else "returned unknown"
            return Verdict(
                decision,
                Reason.SOLVER_UNKNOWN,
                outcome=outcome,
                explanation=f"solver {detail}; "
                + ("allowing (fail-open)" if self.config.fail_open else "blocking (fail-closed)"),
            )
        if exists:
            if status is CheckStatus.SAT:
                return Verdict(Decision.ALLOW, Reason.SAT, outcome=outcome)
            core = tuple(outcome.response.core or ())
            if self.config.minimize_cores and core:
                core = self._minimize(schema, bindings, core)
            if not core:  # solver gave no core; still a policy block
                return Verdict(
                    Decision.BLOCK,
                    Reason.SOLVER_UNKNOWN,
                    outcome=outcome,
                    explanation="policy check unsatisfiable but the solver "
                    "produced no core",
                )
            return Verdict(
                Decision.BLOCK,
                Reason.UNSAT,
                core=core,
                explanation=explain(core, self.pkg),
                outcome=outcome,
            )
        # forall: the goal asserted (not P); unsat means P holds under every
        # completion, sat yields a counterexample completion.
        if status is CheckStatus.UNSAT:
            return Verdict(Decision.ALLOW, Reason.SAT, outcome=outcome)
        return Verdict(
            Decision.BLOCK,
            Reason.NOT_ENTAILED,
            outcome=outcome,
            explanation=f"{schema.designated_predicate} is not entailed: some "
            "completion of the unbound variables violates it",
        )

"""Static and solver-assisted lints over a policy package.

Three probe families cover the recurring failure classes of hand-written or
generated encodings: syntax (the solver rejects the encoding), completeness
(declared state that cannot influence any verdict), and tightness
(predicates that are vacuously permitted, unsatisfiable, or guarded by a
one-directional implication that never prohibits anything).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .extraction import ObservableState, ToolCall
from .policy import PolicyPackage, ToolSchema, validate_package
from .smtlib import App, Assert, CheckStatus, Const, RawSmt
from .solver import SolverPool

LINT_MANIFEST_FILENAME = "lint_manifest.json"


@dataclass(frozen=True)
class LintFinding:
    severity: str  # error | warning | info
    category: str  # syntax | completeness | tightness
    subject: str
    message: str
    witness: str | None = None
    witness_values: Mapping[str, object] | None = None
    proof_ref: str | None = None

    def to_dict(self) -> dict:
        return {
            "severity": self.severity,
            "category": self.category,
            "subject": self.subject,
            "message": self.message,
            "witness": self.witness,
            "witness_values": dict(self.witness_values) if self.witness_values else None,
            "proof_ref": self.proof_ref,
        }


@dataclass(frozen=True)
class ImplicationProbe:
    """A (guard, conclusion) pair registered for one-directional checks."""

    conclusion: str
    guard: str  # raw SMT-LIB term text
    name: str = ""


def load_lint_manifest(package_path: str | Path) -> list[ImplicationProbe]:
    path = Path(package_path) / LINT_MANIFEST_FILENAME
    if not path.exists():
        return []
    raw = json.loads(path.read_text("utf-8"))
    probes = []
    for entry in raw.get("implications", []):
        probes.append(
            ImplicationProbe(
                conclusion=entry["conclusion"],
                guard=entry["guard"],
                name=entry.get("name", ""),
            )
        )
    return probes


# ---------------------------------------------------------------------------
# Syntax


def lint_syntax(pkg: PolicyPackage, pool: SolverPool) -> list[LintFinding]:
    """Package validation (including the solver probe) as error findings."""
    findings = []
    for violation in validate_package(pkg, pool):
        findings.append(
            LintFinding(
                severity="error",
                category="syntax",
                subject=violation.subject or pkg.id,
                message=violation.message,
            )
        )
    return findings


# ---------------------------------------------------------------------------
# Completeness


def _assertion_constant_sets(pkg: PolicyPackage) -> list[frozenset[str]]:
    declared = set(pkg.encoding.declared_constants)
    return [
        frozenset(idents & declared) for _, idents in pkg.encoding.assert_identifiers
    ]


def _dependency_set(pkg: PolicyPackage, predicate: str) -> set[str]:
    """Transitive closure of constants co-occurring in assertions with the
    predicate."""
    groups = _assertion_constant_sets(pkg)
    component = {predicate}
    changed = True
    while changed:
        changed = False
        for group in groups:
            if group & component and not group <= component:
                component |= group
                changed = True
    return component


def lint_completeness(pkg: PolicyPackage) -> list[LintFinding]:
    findings: list[LintFinding] = []
    groups = _assertion_constant_sets(pkg)
    referenced = set().union(*groups) if groups else set()
    schema_vars = {v.name for s in pkg.schemas.values() for v in s.variables}
    predicates = {
        s.designated_predicate
        for s in pkg.schemas.values()
        if s.designated_predicate is not None
    }

    for name in sorted(pkg.encoding.declared_constants):
        if name in referenced or name in schema_vars or name in predicates:
            continue
        findings.append(
            LintFinding(
                severity="warning",
                category="completeness",
                subject=name,
                message="declared constant is referenced by no assertion and no schema "
                "(dead variable)",
            )
        )

    for tool in sorted(pkg.schemas):
        schema = pkg.schemas[tool]
        if schema.designated_predicate is None:
            continue
        component = _dependency_set(pkg, schema.designated_predicate)
        for var in schema.variables:
            if var.name not in component:
                findings.append(
                    LintFinding(
                        severity="warning",
                        category="completeness",
                        subject=var.name,
                        message=f"schema variable of {tool} is disconnected from "
                        f"{schema.designated_predicate}: its binding cannot influence "
                        "the verdict",
                    )
                )

    by_predicate: dict[str, list[str]] = {}
    for tool in sorted(pkg.schemas):
        predicate = pkg.schemas[tool].designated_predicate
        if predicate is not None:
            by_predicate.setdefault(predicate, []).append(tool)
    for predicate, tools in sorted(by_predicate.items()):
        if len(tools) > 1:
            findings.append(
                LintFinding(
                    severity="info",
                    category="completeness",
                    subject=predicate,
                    message="designated predicate is shared by several tools: "
                    + ", ".join(tools),
                )
            )
    return findings


# ---------------------------------------------------------------------------
# Tightness


def _predicate_schemas(pkg: PolicyPackage) -> dict[str, list[ToolSchema]]:
    out: dict[str, list[ToolSchema]] = {}
    for tool in sorted(pkg.schemas):
        schema = pkg.schemas[tool]
        if schema.designated_predicate is not None:
            out.setdefault(schema.designated_predicate, []).append(schema)
    return out


def _witness_targets(pkg: PolicyPackage, predicate: str) -> list[str]:
    names = {predicate}
    for schema in _predicate_schemas(pkg).get(predicate, []):
        names.update(v.name for v in schema.variables)
    return sorted(names)


def _render_witness(values: Mapping[str, object]) -> str:
    def render(v: object) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    return ", ".join(f"{k} = {render(v)}" for k, v in sorted(values.items()))


def lint_tightness(
    pkg: PolicyPackage,
    pool: SolverPool,
    probes: Sequence[ImplicationProbe] = (),
) -> list[LintFinding]:
    """Solver probes per designated predicate.

    (i) encoding entails the predicate: vacuously permitted, error.
    (ii) encoding contradicts the predicate: tool can never run, error.
    (iii) for each registered (guard, conclusion) pair: the predicate can
    hold while its guard is false, so the rule is one-directional; warning
    with a satisfying model as witness.
    """
    findings: list[LintFinding] = []
    session = pool.session(f"{pkg.id}@{pkg.version}", pkg.base_script())

    for predicate in sorted(_predicate_schemas(pkg)):
        never_denied = session.check([Assert(App("not", (Const(predicate),)))])
        if never_denied.response.status is CheckStatus.UNSAT:
            findings.append(
                LintFinding(
                    severity="error",
                    category="tightness",
                    subject=predicate,
                    message="predicate is vacuously permitted (always allowed): "
                    "no reachable state denies it",
                    proof_ref=f"(assert (not {predicate})) is unsat against the encoding",
                )
            )
        never_allowed = session.check([Assert(Const(predicate))])
        if never_allowed.response.status is CheckStatus.UNSAT:
            findings.append(
                LintFinding(
                    severity="error",
                    category="tightness",
                    subject=predicate,
                    message="predicate unsatisfiable (tool can never be called)",
                    proof_ref=f"(assert {predicate}) is unsat against the encoding",
                )
            )

    for probe in probes:
        targets = _witness_targets(pkg, probe.conclusion)
        outcome = session.check(
            [
                Assert(Const(probe.conclusion)),
                RawSmt(f"(assert (not {probe.guard}))"),
            ],
            get_values=targets,
        )
        if outcome.response.status is CheckStatus.SAT:
            values = outcome.values or {}
            label = probe.name or probe.conclusion
            findings.append(
                LintFinding(
                    severity="warning",
                    category="tightness",
                    subject=probe.conclusion,
                    message=f"{probe.conclusion} is permitted while the guard of {label} "
                    "is false: the rule may be one-directional (missing the "
                    "prohibition outside its window)",
                    witness=_render_witness(values),
                    witness_values=values,
                )
            )
    return findings


def lint_package(
    pkg: PolicyPackage,
    pool: SolverPool,
    probes: Sequence[ImplicationProbe] = (),
) -> list[LintFinding]:
    """All three lint families; completeness and tightness run only when the
    package is syntactically sound."""
    findings = lint_syntax(pkg, pool)
    if findings:
        return findings
    findings = lint_completeness(pkg)
    findings.extend(lint_tightness(pkg, pool, probes))
    return findings


# ---------------------------------------------------------------------------
# Witness replay support


def _set_path(root: dict, path: str, value: object) -> None:
    parts = path.split(".")
    current = root
    for part in parts[:-1]:
        current = current.setdefault(part, {})
    current[parts[-1]] = value


def witness_call(
    schema: ToolSchema, values: Mapping[str, object]
) -> tuple[ToolCall, ObservableState]:
    """Turn a tightness witness into a concrete (tool call, state) pair that
    reproduces the problematic Allow through the gate."""
    arguments: dict = {}
    state: dict = {}
    for var in schema.variables:
        if var.name not in values:
            continue
        if var.source.kind == "tool_arg":
            _set_path(arguments, var.source.path, values[var.name])
        elif var.source.kind == "state":
            _set_path(state, var.source.path, values[var.name])
        else:
            raise ValueError(
                f"cannot replay a witness through derived variable {var.name}"
            )
    return ToolCall(schema.tool_name, arguments, call_id="witness"), ObservableState(
        data=state
    )

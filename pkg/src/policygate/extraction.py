"""Concrete variable bindings for a tool schema, extracted from the tool-call
arguments and the agent-observable state.

The deterministic extractor resolves declared dot-paths and registered
derived expressions; the remote extractor delegates to an HTTP endpoint that
returns the same binding shape. Both validate types identically, so the gate
cannot tell which produced a binding.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import httpx

from .smtlib import Sort, SortKind

if TYPE_CHECKING:  # pragma: no cover
    from .policy import ToolSchema


class ExtractionError(Exception):
    pass


class TypeMismatch(ExtractionError):
    """A value was present but does not fit the variable's sort."""

    def __init__(self, variable: str, message: str):
        self.variable = variable
        super().__init__(f"{variable}: {message}")


class DerivedExprError(ExtractionError):
    """A derived expression definition is malformed."""


class RemoteExtractorUnavailable(ExtractionError):
    pass


class RemoteExtractorMalformedReply(ExtractionError):
    pass


_MISSING = object()


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: Mapping[str, object] = field(default_factory=dict)
    call_id: str = ""


@dataclass(frozen=True)
class ObservableState:
    """Agent-observable environment/conversation state for one check."""

    data: Mapping[str, object] = field(default_factory=dict)
    turn_index: int = 0

    def __post_init__(self) -> None:
        if self.turn_index < 0:
            raise ValueError("turn_index must be nonnegative")


@dataclass(frozen=True)
class BindingSet:
    """Typed variable bindings plus the variables that could not be extracted.

    bindings and missing are disjoint and together cover exactly the schema's
    variable list.
    """

    bindings: Mapping[str, object] = field(default_factory=dict)
    missing: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "deterministic"  # deterministic | remote
    endpoint: str = ""
    auth_token_env: str = ""
    timeout_ms: int = 10_000

    def __post_init__(self) -> None:
        if self.kind not in ("deterministic", "remote"):
            raise ValueError(f"unknown extractor kind: {self.kind}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote extractor needs an endpoint")


# ---------------------------------------------------------------------------
# Dot paths: key(.key|.[index])*, no wildcards. Keys are word-like so paths
# stay auditable; dynamic keys go through derived lookup expressions.

_PATH_RE = re.compile(r"[A-Za-z0-9_-]+(\.([A-Za-z0-9_-]+|\[\d+\]))*\Z")


def valid_path(path: str) -> bool:
    return bool(path) and bool(_PATH_RE.match(path))


def resolve_path(root: object, path: str) -> object:
    """Walk a dot-path through nested maps/lists; returns _MISSING if absent."""
    current = root
    for segment in path.split("."):
        if segment.startswith("[") and segment.endswith("]"):
            index = int(segment[1:-1])
            if not isinstance(current, (list, tuple)) or index >= len(current):
                return _MISSING
            current = current[index]
        else:
            if not isinstance(current, Mapping) or segment not in current:
                return _MISSING
            current = current[segment]
    return current


# ---------------------------------------------------------------------------
# Derived expressions: small pure JSON-defined arithmetic over paths.


@dataclass(frozen=True)
class DerivedExpr:
    """Compiled derived expression; evaluates against (arguments, state)."""

    node: object

    def evaluate(self, call: ToolCall, state: ObservableState) -> object:
        return _eval_node(self.node, call, state)


def compile_derived(raw: object) -> DerivedExpr:
    _check_node(raw)
    return DerivedExpr(raw)


def _check_node(node: object) -> None:
    if not isinstance(node, dict) or len(node) == 0:
        raise DerivedExprError(f"expression must be an object, got {node!r}")
    if "arg" in node or "state" in node:
        key = "arg" if "arg" in node else "state"
        if not (isinstance(node[key], str) and valid_path(node[key])):
            raise DerivedExprError(f"bad path in {node!r}")
    elif "lit" in node:
        if not isinstance(node["lit"], (bool, int, float, str)):
            raise DerivedExprError(f"unsupported literal {node['lit']!r}")
    elif "op" in node:
        if node["op"] not in ("+", "-", "*"):
            raise DerivedExprError(f"unsupported operator {node['op']!r}")
        args = node.get("args")
        if not isinstance(args, list) or len(args) < 2:
            raise DerivedExprError("op needs an args list of >=2 expressions")
        for arg in args:
            _check_node(arg)
    elif "lookup" in node:
        spec = node["lookup"]
        if not isinstance(spec, dict) or "in" not in spec or "key" not in spec:
            raise DerivedExprError('lookup needs "in" and "key"')
        _check_node(spec["in"])
        _check_node(spec["key"])
        then = spec.get("then", "")
        if then and not valid_path(then):
            raise DerivedExprError(f"bad lookup path {then!r}")
    else:
        raise DerivedExprError(f"unrecognized expression {node!r}")


def _eval_node(node: dict, call: ToolCall, state: ObservableState) -> object:
    if "arg" in node:
        return resolve_path(call.arguments, node["arg"])
    if "state" in node:
        return resolve_path(state.data, node["state"])
    if "lit" in node:
        return node["lit"]
    if "op" in node:
        values = [_eval_node(a, call, state) for a in node["args"]]
        if any(v is _MISSING for v in values):
            return _MISSING
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeMismatch("<derived>", f"arithmetic on non-numeric value {v!r}")
        op = node["op"]
        result = values[0]
        for v in values[1:]:
            result = result + v if op == "+" else result - v if op == "-" else result * v
        return result
    if "lookup" in node:
        spec = node["lookup"]
        container = _eval_node(spec["in"], call, state)
        key = _eval_node(spec["key"], call, state)
        if container is _MISSING or key is _MISSING:
            return _MISSING
        if not isinstance(container, Mapping) or not isinstance(key, str):
            return _MISSING
        if key not in container:
            return _MISSING
        value = container[key]
        then = spec.get("then", "")
        return resolve_path(value, then) if then else value
    raise DerivedExprError(f"unrecognized expression {node!r}")


# ---------------------------------------------------------------------------
# Type validation


def coerce_value(name: str, value: object, sort: Sort) -> object:
    """Check that an extracted value fits the sort; raise TypeMismatch if not."""
    kind = sort.kind
    if kind is SortKind.BOOL:
        if isinstance(value, bool):
            return value
        raise TypeMismatch(name, f"expected Bool, got {value!r}")
    if kind is SortKind.INT:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise TypeMismatch(name, f"expected Int, got {value!r}")
    if kind is SortKind.REAL:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return value
        raise TypeMismatch(name, f"expected Real, got {value!r}")
    if kind is SortKind.STRING:
        if isinstance(value, str):
            return value
        raise TypeMismatch(name, f"expected String, got {value!r}")
    # enum
    if isinstance(value, str) and value in sort.constructors:
        return value
    raise TypeMismatch(
        name,
        f"{value!r} is not a constructor of {sort.name} "
        f"(expected one of {', '.join(sort.constructors)})",
    )


def validate_binding_set(schema: "ToolSchema", binding_set: BindingSet) -> None:
    """Enforce the coverage partition and per-variable typing."""
    by_name = {v.name: v for v in schema.variables}
    bound = set(binding_set.bindings)
    missing = set(binding_set.missing)
    if bound & missing:
        raise ExtractionError(f"variables both bound and missing: {sorted(bound & missing)}")
    if bound | missing != set(by_name):
        raise ExtractionError(
            f"bindings+missing must cover the schema exactly; got {sorted(bound | missing)}, "
            f"expected {sorted(by_name)}"
        )
    for name, value in binding_set.bindings.items():
        coerce_value(name, value, by_name[name].sort)


# ---------------------------------------------------------------------------
# Extractors


def _extract_deterministic(
    schema: "ToolSchema", call: ToolCall, state: ObservableState
) -> BindingSet:
    bindings: dict[str, object] = {}
    missing: list[str] = []
    for var in schema.variables:
        source = var.source
        if source.kind == "tool_arg":
            value = resolve_path(call.arguments, source.path)
        elif source.kind == "state":
            value = resolve_path(state.data, source.path)
        else:
            expr = var.derived_expr
            if expr is None:
                missing.append(var.name)
                continue
            try:
                value = expr.evaluate(call, state)
            except TypeMismatch:
                raise TypeMismatch(var.name, "derived expression hit a non-numeric operand")
        if value is _MISSING:
            missing.append(var.name)
        else:
            bindings[var.name] = coerce_value(var.name, value, var.sort)
    return BindingSet(bindings=bindings, missing=tuple(missing))


def _schema_wire(schema: "ToolSchema") -> dict:
    return {
        "tool_name": schema.tool_name,
        "write_tool": schema.write_tool,
        "designated_predicate": schema.designated_predicate,
        "variables": [
            {
                "name": v.name,
                "sort": v.sort.smt_name,
                "source": {"kind": v.source.kind, "path": v.source.path},
                "required": v.required,
            }
            for v in schema.variables
        ],
    }


def _extract_remote(
    schema: "ToolSchema",
    call: ToolCall,
    state: ObservableState,
    cfg: ExtractorConfig,
    client: httpx.Client | None = None,
) -> BindingSet:
    import os

    body = {
        "schema": _schema_wire(schema),
        "tool_call": {
            "tool_name": call.tool_name,
            "arguments": dict(call.arguments),
            "call_id": call.call_id,
        },
        "state": {"data": dict(state.data), "turn_index": state.turn_index},
    }
    headers = {}
    if cfg.auth_token_env:
        token = os.environ.get(cfg.auth_token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
    owned = client is None
    client = client or httpx.Client(timeout=cfg.timeout_ms / 1000.0)
    try:
        try:
            response = client.post(cfg.endpoint, json=body, headers=headers)
        except httpx.HTTPError as exc:
            raise RemoteExtractorUnavailable(f"extractor request failed: {exc}") from exc
        if response.status_code != 200:
            raise RemoteExtractorUnavailable(
                f"extractor returned HTTP {response.status_code}"
            )
        try:
            payload = response.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise RemoteExtractorMalformedReply(f"not JSON: {exc}") from exc
    finally:
        if owned:
            client.close()
    if not isinstance(payload, dict) or not isinstance(payload.get("bindings"), dict):
        raise RemoteExtractorMalformedReply('reply must carry a "bindings" object')
    missing_raw = payload.get("missing", [])
    if not isinstance(missing_raw, list):
        raise RemoteExtractorMalformedReply('"missing" must be a list')
    binding_set = BindingSet(
        bindings=dict(payload["bindings"]), missing=tuple(str(m) for m in missing_raw)
    )
    try:
        validate_binding_set(schema, binding_set)
    except TypeMismatch:
        raise
    except ExtractionError as exc:
        raise RemoteExtractorMalformedReply(str(exc)) from exc
    return binding_set


def extract(
    schema: "ToolSchema",
    call: ToolCall,
    state: ObservableState,
    cfg: ExtractorConfig | None = None,
    *,
    client: httpx.Client | None = None,
) -> BindingSet:
    """Produce a BindingSet for every schema variable.

    Unresolvable variables land in `missing`; a present value of the wrong
    sort raises TypeMismatch. The deterministic extractor is a pure function
    of (schema, call, state).
    """
    cfg = cfg or ExtractorConfig()
    if cfg.kind == "remote":
        return _extract_remote(schema, call, state, cfg, client=client)
    return _extract_deterministic(schema, call, state)

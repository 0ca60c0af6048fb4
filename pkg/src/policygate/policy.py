"""Policy packages: a static SMT-LIB policy encoding plus per-tool validation
schemas, loaded from disk (directory or zip archive) and validated up front."""

from __future__ import annotations

import json
import re
import threading
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from . import extraction
from .smtlib import (
    BOOL,
    INT,
    REAL,
    STRING,
    CheckSat,
    IDENTIFIER_RE,
    RawSmt,
    Script,
    SetLogic,
    SetOption,
    Sort,
    SortKind,
    enum_sort,
)
from .solver import SolverPool, SolverScriptError, SolverSpawnError, SolverUnavailable

RESERVED_PREFIXES = ("bind_", "goal_")
ENCODING_FILENAME = "policy.smt2"
SCHEMAS_FILENAME = "schemas.json"

_BUILTIN_SORTS = {"Bool": BOOL, "Int": INT, "Real": REAL, "String": STRING}


class PackageNotFound(Exception):
    """The package path does not exist or lacks the required files."""


class MalformedSchemaFile(Exception):
    """schemas.json is not valid JSON or has the wrong shape."""


@dataclass(frozen=True)
class Violation:
    subject: str | None
    message: str

    def __str__(self) -> str:
        return f"{self.subject}: {self.message}" if self.subject else self.message


class ValidationError(Exception):
    """Package validation failed; carries every violation, not just the first."""

    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


# ---------------------------------------------------------------------------
# Encoding scan


def _split_commands(text: str) -> list[tuple[int, str]]:
    """Split SMT-LIB text into (line, command) pairs by paren balance."""
    commands: list[tuple[int, str]] = []
    depth = 0
    start = -1
    start_line = 0
    in_string = in_comment = False
    line = 1
    for i, ch in enumerate(text):
        if ch == "\n":
            line += 1
            in_comment = False
            continue
        if in_comment:
            continue
        if in_string:
            if ch == '"':
                in_string = False
            continue
        if ch == ";":
            in_comment = True
        elif ch == '"':
            in_string = True
        elif ch == "(":
            if depth == 0:
                start = i
                start_line = line
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0 and start >= 0:
                commands.append((start_line, text[start : i + 1]))
                start = -1
            depth = max(depth, 0)
        elif depth == 0 and not ch.isspace():
            raise ValidationError(
                [Violation(None, f"line {line}: stray text outside any command")]
            )
    if depth != 0:
        raise ValidationError([Violation(None, "unbalanced parentheses in encoding")])
    return commands


def _parse_sexp(text: str) -> object:
    """Parse one s-expression into nested lists of token strings."""
    tokens = re.findall(r'\(|\)|"(?:[^"]|"")*"|[^\s()]+', text)
    pos = 0

    def parse() -> object:
        nonlocal pos
        token = tokens[pos]
        pos += 1
        if token == "(":
            items = []
            while pos < len(tokens) and tokens[pos] != ")":
                items.append(parse())
            pos += 1  # closing paren
            return items
        return token

    result = parse()
    return result


_IDENT_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_-]*")


@dataclass(frozen=True)
class PolicyEncoding:
    """Scanned static encoding: verbatim text plus its declared surface."""

    source_text: str
    declared_constants: Mapping[str, Sort]
    declared_enums: tuple[Sort, ...]
    named_rules: tuple[str, ...]
    declaration_text: tuple[str, ...] = ()
    rule_assert_text: Mapping[str, str] = field(default_factory=dict)
    unnamed_assert_text: tuple[str, ...] = ()
    assert_identifiers: tuple[tuple[str | None, frozenset[str]], ...] = ()
    defined_funs: frozenset[str] = frozenset()


def scan_encoding(text: str) -> tuple[PolicyEncoding | None, list[Violation]]:
    """Structurally scan an encoding, collecting declarations and violations.

    Only declare-const, declare-datatypes, define-fun, assert and set-option
    commands are allowed; check-sat and get-unsat-core are rejected outright.
    """
    violations: list[Violation] = []
    constants: dict[str, Sort] = {}
    enums: list[Sort] = []
    enum_by_name: dict[str, Sort] = {}
    named_rules: list[str] = []
    declaration_text: list[str] = []
    rule_text: dict[str, str] = {}
    unnamed_text: list[str] = []
    assert_idents: list[tuple[str | None, frozenset[str]]] = []
    defined: set[str] = set()

    def resolve_sort(token: object, line: int) -> Sort | None:
        if isinstance(token, str):
            if token in _BUILTIN_SORTS:
                return _BUILTIN_SORTS[token]
            if token in enum_by_name:
                return enum_by_name[token]
        violations.append(Violation(str(token), f"line {line}: unknown sort"))
        return None

    try:
        commands = _split_commands(text)
    except ValidationError as exc:
        return None, exc.violations

    for line, cmd_text in commands:
        try:
            sexp = _parse_sexp(cmd_text)
        except IndexError:
            violations.append(Violation(None, f"line {line}: unparseable command"))
            continue
        if not isinstance(sexp, list) or not sexp or not isinstance(sexp[0], str):
            violations.append(Violation(None, f"line {line}: unparseable command"))
            continue
        head = sexp[0]
        if head in ("check-sat", "check-sat-assuming"):
            violations.append(Violation(None, "encoding must not contain check-sat"))
        elif head == "get-unsat-core":
            violations.append(Violation(None, "encoding must not contain get-unsat-core"))
        elif head == "set-option":
            pass  # kept verbatim in source_text
        elif head == "declare-const":
            if len(sexp) != 3 or not isinstance(sexp[1], str):
                violations.append(Violation(None, f"line {line}: malformed declare-const"))
                continue
            name = sexp[1]
            if not IDENTIFIER_RE.match(name):
                violations.append(Violation(name, f"line {line}: invalid constant name"))
                continue
            sort = resolve_sort(sexp[2], line)
            if sort is None:
                continue
            if name in constants:
                violations.append(Violation(name, "constant declared twice"))
                continue
            constants[name] = sort
            declaration_text.append(cmd_text)
        elif head == "declare-datatypes":
            parsed = _parse_enum_declaration(sexp, line, violations)
            if parsed is None:
                continue
            if parsed.name in enum_by_name:
                violations.append(Violation(parsed.name, "enum sort declared twice"))
                continue
            enum_by_name[parsed.name] = parsed
            enums.append(parsed)
            declaration_text.append(cmd_text)
        elif head == "define-fun":
            if len(sexp) < 5 or not isinstance(sexp[1], str) or not isinstance(sexp[2], list):
                violations.append(Violation(None, f"line {line}: malformed define-fun"))
                continue
            name = sexp[1]
            sort = resolve_sort(sexp[3], line)
            if sort is None:
                continue
            if name in constants:
                violations.append(Violation(name, "symbol defined twice"))
                continue
            constants[name] = sort
            defined.add(name)
            declaration_text.append(cmd_text)
        elif head == "assert":
            if len(sexp) != 2:
                violations.append(Violation(None, f"line {line}: malformed assert"))
                continue
            body = sexp[1]
            name: str | None = None
            if isinstance(body, list) and body and body[0] == "!":
                try:
                    named_at = body.index(":named")
                    name = body[named_at + 1] if isinstance(body[named_at + 1], str) else None
                except (ValueError, IndexError):
                    name = None
                if name is None:
                    violations.append(Violation(None, f"line {line}: malformed :named attribute"))
                    continue
                if not IDENTIFIER_RE.match(name):
                    violations.append(Violation(name, f"line {line}: invalid assertion name"))
                    continue
                if any(name.startswith(p) for p in RESERVED_PREFIXES):
                    violations.append(
                        Violation(name, "rule names must not use the reserved "
                                        "bind_/goal_ prefixes")
                    )
                    continue
                if name in named_rules:
                    violations.append(Violation(name, "duplicate rule name"))
                    continue
                named_rules.append(name)
                rule_text[name] = cmd_text
            else:
                unnamed_text.append(cmd_text)
            idents = frozenset(_IDENT_TOKEN_RE.findall(cmd_text))
            assert_idents.append((name, idents))
        else:
            violations.append(Violation(head, f"line {line}: command not allowed in encoding"))

    encoding = PolicyEncoding(
        source_text=text,
        declared_constants=constants,
        declared_enums=tuple(enums),
        named_rules=tuple(named_rules),
        declaration_text=tuple(declaration_text),
        rule_assert_text=rule_text,
        unnamed_assert_text=tuple(unnamed_text),
        assert_identifiers=tuple(assert_idents),
        defined_funs=frozenset(defined),
    )
    return encoding, violations


def _parse_enum_declaration(sexp: list, line: int, violations: list[Violation]) -> Sort | None:
    def fail(msg: str) -> None:
        violations.append(Violation(None, f"line {line}: {msg}"))

    if len(sexp) != 3 or not isinstance(sexp[1], list) or not isinstance(sexp[2], list):
        fail("malformed declare-datatypes")
        return None
    if len(sexp[1]) != 1 or len(sexp[2]) != 1:
        fail("exactly one datatype per declare-datatypes")
        return None
    decl = sexp[1][0]
    if not (isinstance(decl, list) and len(decl) == 2 and decl[1] == "0"):
        fail("datatype must be declared with arity 0")
        return None
    name = decl[0]
    ctors = sexp[2][0]
    if not isinstance(ctors, list):
        fail("malformed constructor list")
        return None
    names: list[str] = []
    for ctor in ctors:
        if not (isinstance(ctor, list) and len(ctor) == 1 and isinstance(ctor[0], str)):
            fail("enum constructors must be nullary")
            return None
        names.append(ctor[0])
    try:
        return enum_sort(name, tuple(names))
    except Exception as exc:
        fail(str(exc))
        return None


# ---------------------------------------------------------------------------
# Schemas


@dataclass(frozen=True)
class VariableSource:
    kind: str  # tool_arg | state | derived
    path: str


@dataclass(frozen=True)
class VariableSpec:
    name: str
    sort: Sort
    source: VariableSource
    required: bool = True
    derived_expr: extraction.DerivedExpr | None = None


@dataclass(frozen=True)
class ToolSchema:
    tool_name: str
    variables: tuple[VariableSpec, ...] = ()
    designated_predicate: str | None = None
    write_tool: bool = False

    @property
    def empty(self) -> bool:
        return not self.variables and self.designated_predicate is None


@dataclass(frozen=True)
class PolicyPackage:
    id: str
    version: str
    encoding: PolicyEncoding
    schemas: Mapping[str, ToolSchema]
    solver_options: Mapping[str, object] = field(default_factory=dict)
    logic: str = "ALL"
    unknown_tool_default: str = "block"  # block | allow
    derived: Mapping[str, extraction.DerivedExpr] = field(default_factory=dict)

    def schema_for(self, tool_name: str) -> ToolSchema | None:
        return self.schemas.get(tool_name)

    @property
    def tool_count(self) -> int:
        return len(self.schemas)

    def prelude_commands(self) -> list:
        """Solver options and logic declaration preceding the encoding."""
        commands: list = [SetOption(k, v) for k, v in sorted(self.solver_options.items())]
        commands.append(SetLogic(self.logic))
        return commands

    def base_script(self) -> Script:
        """Prelude plus the verbatim encoding; the static prefix of every check."""
        return Script(
            tuple([*self.prelude_commands(), RawSmt(self.encoding.source_text)]),
            assume_declared=dict(self.encoding.declared_constants),
            assume_named=frozenset(self.encoding.named_rules),
        )


def _parse_schema_json(
    raw: object, encoding: PolicyEncoding, fallback_id: str
) -> tuple["PolicyPackage | None", list[Violation]]:
    violations: list[Violation] = []
    if not isinstance(raw, dict) or not isinstance(raw.get("tools"), list):
        raise MalformedSchemaFile('schemas.json must be an object with a "tools" list')

    defaults = raw.get("defaults", {})
    if not isinstance(defaults, dict):
        raise MalformedSchemaFile('"defaults" must be an object')
    unknown_tool = defaults.get("unknown_tool", "block")
    if unknown_tool not in ("block", "allow"):
        violations.append(
            Violation("defaults.unknown_tool", "must be 'block' or 'allow'")
        )
        unknown_tool = "block"

    derived_raw = raw.get("derived", {})
    if not isinstance(derived_raw, dict):
        raise MalformedSchemaFile('"derived" must be an object of named expressions')
    derived: dict[str, extraction.DerivedExpr] = {}
    for key, expr_json in derived_raw.items():
        try:
            derived[key] = extraction.compile_derived(expr_json)
        except extraction.DerivedExprError as exc:
            violations.append(Violation(key, f"bad derived expression: {exc}"))

    enum_by_name = {s.name: s for s in encoding.declared_enums}

    def parse_sort(token: object, subject: str) -> Sort | None:
        if isinstance(token, str):
            if token in _BUILTIN_SORTS:
                return _BUILTIN_SORTS[token]
            if token in enum_by_name:
                return enum_by_name[token]
        violations.append(Violation(subject, f"unknown sort {token!r}"))
        return None

    schemas: dict[str, ToolSchema] = {}
    for entry in raw["tools"]:
        if not isinstance(entry, dict) or not isinstance(entry.get("tool_name"), str):
            raise MalformedSchemaFile("every tool entry needs a string tool_name")
        tool = entry["tool_name"]
        if tool in schemas:
            violations.append(Violation(tool, "duplicate tool schema"))
            continue
        write_tool = entry.get("write_tool", False)
        if not isinstance(write_tool, bool):
            violations.append(Violation(tool, "write_tool must be a boolean"))
            write_tool = False
        predicate = entry.get("designated_predicate")
        variables: list[VariableSpec] = []
        for var_raw in entry.get("variables", []) or []:
            if not isinstance(var_raw, dict) or not isinstance(var_raw.get("name"), str):
                raise MalformedSchemaFile(f"{tool}: every variable needs a string name")
            vname = var_raw["name"]
            subject = f"{tool}.{vname}"
            sort = parse_sort(var_raw.get("sort"), subject)
            source_raw = var_raw.get("source")
            if not isinstance(source_raw, dict):
                violations.append(Violation(subject, "missing source"))
                continue
            kind = source_raw.get("kind")
            path = source_raw.get("path", "")
            if kind not in ("tool_arg", "state", "derived"):
                violations.append(Violation(subject, f"unknown source kind {kind!r}"))
                continue
            expr = None
            if kind == "derived":
                expr = derived.get(path)
                if expr is None:
                    violations.append(
                        Violation(subject, f"derived expression {path!r} is not registered")
                    )
            elif not extraction.valid_path(path):
                violations.append(Violation(subject, f"invalid dot-path {path!r}"))
            declared = encoding.declared_constants.get(vname)
            if declared is None:
                violations.append(Violation(vname, "schema variable not declared in encoding"))
            elif sort is not None and declared != sort:
                violations.append(
                    Violation(vname, f"schema sort {sort} != declared sort {declared}")
                )
            if sort is None:
                continue
            variables.append(
                VariableSpec(
                    name=vname,
                    sort=sort,
                    source=VariableSource(kind, path),
                    required=bool(var_raw.get("required", True)),
                    derived_expr=expr,
                )
            )

        if predicate is not None:
            declared = encoding.declared_constants.get(predicate)
            if declared is None:
                violations.append(
                    Violation(predicate, f"designated predicate of {tool} is not declared")
                )
            elif declared.kind is not SortKind.BOOL:
                violations.append(Violation(predicate, "predicate must be Bool"))
        if variables and predicate is None:
            violations.append(
                Violation(tool, "schema has variables but no designated predicate")
            )
        if not variables and predicate is not None:
            violations.append(
                Violation(tool, "unconditionally allowed tools must have empty schemas "
                                "(drop the designated predicate or add variables)")
            )
        schemas[tool] = ToolSchema(
            tool_name=tool,
            variables=tuple(variables),
            designated_predicate=predicate,
            write_tool=write_tool,
        )

    solver_options = raw.get("solver_options", {})
    if not isinstance(solver_options, dict):
        raise MalformedSchemaFile('"solver_options" must be an object')
    logic = raw.get("logic", "ALL")

    package = PolicyPackage(
        id=str(raw.get("id", fallback_id)),
        version=str(raw.get("version", "0")),
        encoding=encoding,
        schemas=schemas,
        solver_options=solver_options,
        logic=logic,
        unknown_tool_default=unknown_tool,
        derived=derived,
    )
    return package, violations


# ---------------------------------------------------------------------------
# Loading


def _read_package_files(path: Path) -> tuple[str, str, str]:
    """Return (encoding_text, schemas_text, fallback_id) from a dir or zip."""
    if not path.exists():
        raise PackageNotFound(f"no such package path: {path}")
    if path.is_dir():
        enc = path / ENCODING_FILENAME
        sch = path / SCHEMAS_FILENAME
        if not enc.exists() or not sch.exists():
            raise PackageNotFound(
                f"{path} must contain {ENCODING_FILENAME} and {SCHEMAS_FILENAME}"
            )
        return enc.read_text("utf-8"), sch.read_text("utf-8"), path.name
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            members = {Path(n).name: n for n in zf.namelist() if not n.endswith("/")}
            if ENCODING_FILENAME not in members or SCHEMAS_FILENAME not in members:
                raise PackageNotFound(
                    f"{path} must contain {ENCODING_FILENAME} and {SCHEMAS_FILENAME}"
                )
            enc_text = zf.read(members[ENCODING_FILENAME]).decode("utf-8")
            sch_text = zf.read(members[SCHEMAS_FILENAME]).decode("utf-8")
        return enc_text, sch_text, path.stem
    raise PackageNotFound(f"{path} is neither a directory nor a zip archive")


def load_package(path: str | Path) -> PolicyPackage:
    """Load and fully validate a policy package from a directory or archive.

    Raises PackageNotFound, MalformedSchemaFile, or ValidationError carrying
    every violation found.
    """
    enc_text, sch_text, fallback_id = _read_package_files(Path(path))
    encoding, violations = scan_encoding(enc_text)
    if encoding is None:
        raise ValidationError(violations)
    try:
        raw = json.loads(sch_text)
    except json.JSONDecodeError as exc:
        raise MalformedSchemaFile(f"schemas.json: {exc}") from exc
    package, schema_violations = _parse_schema_json(raw, encoding, fallback_id)
    violations.extend(schema_violations)
    if violations:
        raise ValidationError(violations)
    assert package is not None
    return package


def structural_violations(pkg: PolicyPackage) -> list[Violation]:
    """Re-run the load-time invariants against an in-memory package."""
    encoding, violations = scan_encoding(pkg.encoding.source_text)
    if encoding is not None:
        for schema in pkg.schemas.values():
            if schema.designated_predicate is not None:
                declared = encoding.declared_constants.get(schema.designated_predicate)
                if declared is None:
                    violations.append(
                        Violation(schema.designated_predicate, "predicate not declared")
                    )
                elif declared.kind is not SortKind.BOOL:
                    violations.append(
                        Violation(schema.designated_predicate, "predicate must be Bool")
                    )
            for var in schema.variables:
                declared = encoding.declared_constants.get(var.name)
                if declared is None:
                    violations.append(Violation(var.name, "schema variable not declared"))
                elif declared != var.sort:
                    violations.append(
                        Violation(var.name, f"schema sort {var.sort} != declared {declared}")
                    )
            if schema.variables and schema.designated_predicate is None:
                violations.append(Violation(schema.tool_name, "variables without a predicate"))
            if not schema.variables and schema.designated_predicate is not None:
                violations.append(Violation(schema.tool_name, "predicate on an empty schema"))
    return violations


def validate_package(pkg: PolicyPackage, pool: SolverPool) -> list[Violation]:
    """Structural invariants plus a solver probe of the bare encoding.

    The probe asserts nothing beyond the encoding and must elicit sat or
    unsat; solver-reported errors become violations verbatim.
    """
    violations = structural_violations(pkg)
    probe = Script(
        tuple([*pkg.prelude_commands(), RawSmt(pkg.encoding.source_text), CheckSat()]),
        assume_declared=dict(pkg.encoding.declared_constants),
        assume_named=frozenset(pkg.encoding.named_rules),
    )
    try:
        pool.check(probe)
    except SolverScriptError as exc:
        violations.append(Violation(None, f"solver rejected the encoding: {exc}"))
    except SolverSpawnError as exc:
        raise SolverUnavailable(str(exc)) from exc
    return violations


class PolicyRegistry:
    """Thread-safe package registry with atomic replace-on-reload."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._packages: dict[str, PolicyPackage] = {}

    def get(self, package_id: str) -> PolicyPackage | None:
        with self._lock:
            return self._packages.get(package_id)

    def put(self, pkg: PolicyPackage) -> None:
        with self._lock:
            self._packages[pkg.id] = pkg

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._packages)

    def all(self) -> list[PolicyPackage]:
        with self._lock:
            return [self._packages[k] for k in sorted(self._packages)]

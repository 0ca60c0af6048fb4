"""Minimal SMT-LIB 2.0 data model: sorts, terms, commands, a deterministic
script emitter, and parsers for solver responses."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Mapping, Union

IDENTIFIER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_-]*\Z")


class SmtError(Exception):
    """Base class for script construction and response parsing errors."""


class SortError(SmtError):
    """A term is ill-sorted (wrong operand sorts or arity)."""


class UndeclaredSymbol(SmtError):
    """A term references a constant that is not declared in the script."""


class DuplicateAssertName(SmtError):
    """Two named assertions in one script share a name."""


class MalformedResponse(SmtError):
    """Solver output did not match the expected response grammar."""


# ---------------------------------------------------------------------------
# Sorts


class SortKind(Enum):
    BOOL = "Bool"
    INT = "Int"
    REAL = "Real"
    STRING = "String"
    ENUM = "Enum"


@dataclass(frozen=True)
class Sort:
    """Bool, Int, Real, String, or an enum sort with nullary constructors."""

    kind: SortKind
    name: str | None = None
    constructors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind is SortKind.ENUM:
            if not self.name or not IDENTIFIER_RE.match(self.name):
                raise SortError(f"invalid enum sort name: {self.name!r}")
            if not self.constructors:
                raise SortError(f"enum sort {self.name} has no constructors")
            seen = set()
            for ctor in self.constructors:
                if not ctor or not IDENTIFIER_RE.match(ctor):
                    raise SortError(f"invalid enum constructor name: {ctor!r}")
                if ctor in seen:
                    raise SortError(f"duplicate constructor {ctor} in enum {self.name}")
                seen.add(ctor)
        elif self.name is not None or self.constructors:
            raise SortError(f"{self.kind.value} sort takes no name or constructors")

    @property
    def smt_name(self) -> str:
        return self.name if self.kind is SortKind.ENUM else self.kind.value

    def __str__(self) -> str:
        return self.smt_name


BOOL = Sort(SortKind.BOOL)
INT = Sort(SortKind.INT)
REAL = Sort(SortKind.REAL)
STRING = Sort(SortKind.STRING)


def enum_sort(name: str, constructors: tuple[str, ...] | list[str]) -> Sort:
    return Sort(SortKind.ENUM, name, tuple(constructors))


# ---------------------------------------------------------------------------
# Terms


@dataclass(frozen=True)
class Const:
    """Reference to a declared constant."""

    name: str


@dataclass(frozen=True)
class Lit:
    """Literal with an explicit sort; enum literals hold a constructor name."""

    value: object
    sort: Sort

    def __post_init__(self) -> None:
        kind = self.sort.kind
        v = self.value
        if kind is SortKind.BOOL and not isinstance(v, bool):
            raise SortError(f"Bool literal must be a bool, got {v!r}")
        if kind is SortKind.INT and (isinstance(v, bool) or not isinstance(v, int)):
            raise SortError(f"Int literal must be an int, got {v!r}")
        if kind is SortKind.REAL and not isinstance(v, (int, float, Fraction)):
            raise SortError(f"Real literal must be numeric, got {v!r}")
        if kind is SortKind.STRING and not isinstance(v, str):
            raise SortError(f"String literal must be a str, got {v!r}")
        if kind is SortKind.ENUM and v not in self.sort.constructors:
            raise SortError(
                f"{v!r} is not a constructor of enum {self.sort.name} "
                f"(expected one of {', '.join(self.sort.constructors)})"
            )


@dataclass(frozen=True)
class App:
    """Operator application."""

    op: str
    args: tuple["Term", ...]


Term = Union[Const, Lit, App]


def lit(value: object, sort: Sort | None = None) -> Lit:
    """Build a literal, inferring Bool/Int/Real/String sorts from the value."""
    if sort is not None:
        return Lit(value, sort)
    if isinstance(value, bool):
        return Lit(value, BOOL)
    if isinstance(value, int):
        return Lit(value, INT)
    if isinstance(value, (float, Fraction)):
        return Lit(value, REAL)
    if isinstance(value, str):
        return Lit(value, STRING)
    raise SortError(f"cannot infer a sort for literal {value!r}")


_NUMERIC = (SortKind.INT, SortKind.REAL)
OPERATORS = frozenset(
    {"=", "distinct", "not", "and", "or", "=>", "ite", "<", "<=", ">", ">=", "+", "-", "*"}
)


def sort_of(term: Term, declared: Mapping[str, Sort]) -> Sort:
    """Derive the unique sort of a term, or raise SortError/UndeclaredSymbol."""
    if isinstance(term, Const):
        try:
            return declared[term.name]
        except KeyError:
            raise UndeclaredSymbol(f"undeclared constant: {term.name}") from None
    if isinstance(term, Lit):
        return term.sort
    if not isinstance(term, App):
        raise SortError(f"not a term: {term!r}")

    op, args = term.op, term.args
    if op not in OPERATORS:
        raise SortError(f"unsupported operator: {op}")
    arg_sorts = [sort_of(a, declared) for a in args]

    def require(cond: bool, msg: str) -> None:
        if not cond:
            raise SortError(f"({op} ...): {msg}")

    if op == "not":
        require(len(args) == 1, f"expects 1 argument, got {len(args)}")
        require(arg_sorts[0].kind is SortKind.BOOL, "argument must be Bool")
        return BOOL
    if op in ("and", "or", "=>"):
        require(len(args) >= 2, f"expects >=2 arguments, got {len(args)}")
        require(all(s.kind is SortKind.BOOL for s in arg_sorts), "arguments must be Bool")
        return BOOL
    if op in ("=", "distinct"):
        require(len(args) >= 2, f"expects >=2 arguments, got {len(args)}")
        require(all(s == arg_sorts[0] for s in arg_sorts), "arguments must share one sort")
        return BOOL
    if op == "ite":
        require(len(args) == 3, f"expects 3 arguments, got {len(args)}")
        require(arg_sorts[0].kind is SortKind.BOOL, "condition must be Bool")
        require(arg_sorts[1] == arg_sorts[2], "branches must share one sort")
        return arg_sorts[1]
    if op in ("<", "<=", ">", ">="):
        require(len(args) >= 2, f"expects >=2 arguments, got {len(args)}")
        require(
            all(s.kind in _NUMERIC and s == arg_sorts[0] for s in arg_sorts),
            "arguments must all be Int or all be Real",
        )
        return BOOL
    # +, -, *
    require(len(args) >= (1 if op == "-" else 2), "missing arguments")
    require(
        all(s.kind in _NUMERIC and s == arg_sorts[0] for s in arg_sorts),
        "arguments must all be Int or all be Real",
    )
    return arg_sorts[0]


def _emit_string(value: str) -> str:
    return '"' + value.replace('"', '""') + '"'


def _emit_real(value: object) -> str:
    frac = Fraction(value)  # exact for int/Fraction; binary-exact for float
    if frac.denominator == 1:
        n = frac.numerator
        return f"{n}.0" if n >= 0 else f"(- {-n}.0)"
    p, q = frac.numerator, frac.denominator
    if p < 0:
        return f"(- (/ {-p} {q}))"
    return f"(/ {p} {q})"


def emit_term(term: Term) -> str:
    if isinstance(term, Const):
        return term.name
    if isinstance(term, Lit):
        kind = term.sort.kind
        if kind is SortKind.BOOL:
            return "true" if term.value else "false"
        if kind is SortKind.INT:
            v = term.value
            return str(v) if v >= 0 else f"(- {-v})"
        if kind is SortKind.REAL:
            return _emit_real(term.value)
        if kind is SortKind.STRING:
            return _emit_string(term.value)
        return str(term.value)  # enum constructor symbol
    return "(" + term.op + " " + " ".join(emit_term(a) for a in term.args) + ")"


# ---------------------------------------------------------------------------
# Commands and scripts


@dataclass(frozen=True)
class SetOption:
    key: str  # without the leading colon
    value: object


@dataclass(frozen=True)
class SetLogic:
    name: str


@dataclass(frozen=True)
class DeclareConst:
    name: str
    sort: Sort


@dataclass(frozen=True)
class DeclareEnumSort:
    sort: Sort

    def __post_init__(self) -> None:
        if self.sort.kind is not SortKind.ENUM:
            raise SortError("DeclareEnumSort requires an enum sort")


@dataclass(frozen=True)
class Assert:
    term: Term
    name: str | None = None


@dataclass(frozen=True)
class CheckSat:
    pass


@dataclass(frozen=True)
class GetUnsatCore:
    pass


@dataclass(frozen=True)
class RawSmt:
    """Pre-validated SMT-LIB text included verbatim (a policy encoding).

    Symbols it declares and assertion names it introduces are communicated
    through Script.assume_declared / Script.assume_named rather than parsed.
    """

    text: str


Command = Union[
    SetOption, SetLogic, DeclareConst, DeclareEnumSort, Assert, CheckSat, GetUnsatCore, RawSmt
]


@dataclass(frozen=True)
class Script:
    """Ordered command list plus ambient declarations from embedded raw text."""

    commands: tuple[Command, ...]
    assume_declared: Mapping[str, Sort] = field(default_factory=dict)
    assume_named: frozenset[str] = frozenset()

    def validate(self) -> None:
        declared: dict[str, Sort] = dict(self.assume_declared)
        names: set[str] = set(self.assume_named)
        check_sats = 0
        for cmd in self.commands:
            if isinstance(cmd, DeclareEnumSort):
                for ctor in cmd.sort.constructors:
                    if ctor in declared:
                        raise DuplicateAssertName(
                            f"constructor {ctor} collides with a declared symbol"
                        )
                    declared[ctor] = cmd.sort
            elif isinstance(cmd, DeclareConst):
                if not IDENTIFIER_RE.match(cmd.name):
                    raise SortError(f"invalid constant name: {cmd.name!r}")
                if cmd.name in declared:
                    raise DuplicateAssertName(f"constant {cmd.name} declared twice")
                declared[cmd.name] = cmd.sort
            elif isinstance(cmd, Assert):
                if cmd.name is not None:
                    if not IDENTIFIER_RE.match(cmd.name):
                        raise SortError(f"invalid assertion name: {cmd.name!r}")
                    if cmd.name in names:
                        raise DuplicateAssertName(f"assertion name {cmd.name} used twice")
                    names.add(cmd.name)
                got = sort_of(cmd.term, declared)
                if got.kind is not SortKind.BOOL:
                    raise SortError(f"asserted term has sort {got}, expected Bool")
            elif isinstance(cmd, CheckSat):
                check_sats += 1
                if check_sats > 1:
                    raise SortError("script contains more than one check-sat")
            elif isinstance(cmd, GetUnsatCore):
                if check_sats == 0:
                    raise SortError("get-unsat-core must follow a check-sat")

    def named_assertions(self) -> list[str]:
        out = list(self.assume_named)
        for cmd in self.commands:
            if isinstance(cmd, Assert) and cmd.name is not None:
                out.append(cmd.name)
        return out


def script(*commands: Command, **kwargs) -> Script:
    return Script(tuple(commands), **kwargs)


def _emit_option_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return str(value)
    text = str(value)
    return text if re.match(r"[A-Za-z0-9._+-]+\Z", text) else _emit_string(text)


def emit_command(cmd: Command) -> str:
    if isinstance(cmd, SetOption):
        return f"(set-option :{cmd.key} {_emit_option_value(cmd.value)})"
    if isinstance(cmd, SetLogic):
        return f"(set-logic {cmd.name})"
    if isinstance(cmd, DeclareConst):
        return f"(declare-const {cmd.name} {cmd.sort.smt_name})"
    if isinstance(cmd, DeclareEnumSort):
        ctors = " ".join(f"({c})" for c in cmd.sort.constructors)
        return f"(declare-datatypes (({cmd.sort.name} 0)) (({ctors})))"
    if isinstance(cmd, Assert):
        body = emit_term(cmd.term)
        if cmd.name is not None:
            body = f"(! {body} :named {cmd.name})"
        return f"(assert {body})"
    if isinstance(cmd, CheckSat):
        return "(check-sat)"
    if isinstance(cmd, GetUnsatCore):
        return "(get-unsat-core)"
    if isinstance(cmd, RawSmt):
        return cmd.text.rstrip("\n")
    raise SortError(f"unknown command: {cmd!r}")


def emit_script(script: Script) -> str:
    """Emit SMT-LIB 2.0 text, one command per line, byte-deterministic."""
    script.validate()
    return "".join(emit_command(c) + "\n" for c in script.commands)


# ---------------------------------------------------------------------------
# Solver responses


class CheckStatus(Enum):
    SAT = "sat"
    UNSAT = "unsat"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SolverResponse:
    status: CheckStatus
    core: tuple[str, ...] | None = None
    raw: str = ""

    def __post_init__(self) -> None:
        if self.core is not None and self.status is not CheckStatus.UNSAT:
            raise MalformedResponse("unsat core present on a non-unsat response")


def parse_check_sat(text: str) -> CheckStatus:
    """Map a solver's check-sat output token to a status."""
    token = text.strip()
    for status in CheckStatus:
        if token == status.value:
            return status
    raise MalformedResponse(f"unexpected check-sat response: {text.strip()!r}")


def parse_unsat_core(text: str) -> list[str]:
    """Extract assertion names from a get-unsat-core response, in order."""
    body = text.strip()
    if not (body.startswith("(") and body.endswith(")")):
        raise MalformedResponse(f"unexpected unsat-core response: {text.strip()!r}")
    names = body[1:-1].split()
    for name in names:
        if not IDENTIFIER_RE.match(name):
            raise MalformedResponse(f"invalid name in unsat core: {name!r}")
    return names


def _parse_value_sexp(node: object) -> object:
    if isinstance(node, list):
        if len(node) == 2 and node[0] == "-":
            inner = _parse_value_sexp(node[1])
            if isinstance(inner, (int, float)):
                return -inner
        if len(node) == 3 and node[0] == "/":
            num, den = _parse_value_sexp(node[1]), _parse_value_sexp(node[2])
            if isinstance(num, (int, float)) and isinstance(den, (int, float)):
                return num / den
        raise MalformedResponse(f"unexpected value expression: {node!r}")
    text = str(node)
    if text == "true":
        return True
    if text == "false":
        return False
    if re.match(r"[0-9]+\Z", text):
        return int(text)
    if re.match(r"[0-9]+\.[0-9]+\Z", text):
        return float(text)
    if text.startswith('"') and text.endswith('"'):
        return text[1:-1].replace('""', '"')
    if IDENTIFIER_RE.match(text):
        return text  # enum constructor
    raise MalformedResponse(f"unexpected value token: {text!r}")


def parse_get_values(text: str) -> dict[str, object]:
    """Parse a get-value response: ((name value) ...) -> {name: value}."""
    body = text.strip()
    if not (body.startswith("(") and body.endswith(")")):
        raise MalformedResponse(f"unexpected get-value response: {text.strip()!r}")
    tokens = re.findall(r'\(|\)|"(?:[^"]|"")*"|[^\s()]+', body)
    pos = 0

    def parse() -> object:
        nonlocal pos
        if pos >= len(tokens):
            raise MalformedResponse("truncated get-value response")
        token = tokens[pos]
        pos += 1
        if token == "(":
            items = []
            while pos < len(tokens) and tokens[pos] != ")":
                items.append(parse())
            pos += 1
            return items
        return token

    top = parse()
    if not isinstance(top, list):
        raise MalformedResponse(f"unexpected get-value response: {text.strip()!r}")
    out: dict[str, object] = {}
    for pair in top:
        if not (isinstance(pair, list) and len(pair) == 2 and isinstance(pair[0], str)):
            raise MalformedResponse(f"unexpected get-value pair: {pair!r}")
        out[pair[0]] = _parse_value_sexp(pair[1])
    return out

"""Command-line interface: check one tool call, lint a package, replay a
trace, or serve the HTTP gate.

Exit codes: check 0=allow 3=block 4=error; lint 0=clean 1=warnings 2=errors;
usage errors 64; other operational failures 4.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from .extraction import ObservableState, ToolCall
from .gate import Decision, GateConfig, GateEngine, JsonlAuditLog, SessionBudget
from .lint import lint_package, load_lint_manifest
from .policy import MalformedSchemaFile, PackageNotFound, ValidationError, load_package
from .replay import MalformedTrace, relative_decline, render_table, replay
from .solver import SolverConfig, SolverPool, SolverSpawnError

EX_ALLOW, EX_BLOCK, EX_ERROR, EX_USAGE = 0, 3, 4, 64


class OperationalError(click.ClickException):
    exit_code = EX_ERROR


def _load_package_or_fail(path: str):
    try:
        return load_package(path)
    except ValidationError as exc:
        lines = "\n".join(f"  - {v}" for v in exc.violations)
        raise OperationalError(f"package {path} failed validation:\n{lines}")
    except (PackageNotFound, MalformedSchemaFile) as exc:
        raise OperationalError(str(exc))


def _pool(solver: str | None, timeout_ms: int = 5000) -> SolverPool:
    try:
        return SolverPool(SolverConfig(binary=solver, timeout_ms=timeout_ms))
    except SolverSpawnError as exc:
        raise OperationalError(str(exc))


def _read_json(path: str, what: str) -> object:
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise OperationalError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise OperationalError(f"{what} file is not valid JSON: {exc}")


def _parse_state(raw: object) -> ObservableState:
    if not isinstance(raw, dict):
        raise OperationalError("state must be a JSON object")
    if "data" in raw and isinstance(raw["data"], dict):
        return ObservableState(data=raw["data"], turn_index=int(raw.get("turn_index", 0)))
    return ObservableState(data=raw)


@click.group()
def cli() -> None:
    """Solver-checked policy gate for agent tool calls."""


@cli.command()
@click.argument("package", type=click.Path(exists=True))
@click.argument("call_json", type=click.Path(exists=True))
@click.argument("state_json", type=click.Path(exists=True))
@click.option("--session", default="cli", help="Session id for the retry budget.")
@click.option("--solver", default=None, help="Solver binary (defaults to $POLICY_GATE_SOLVER).")
@click.option("--timeout-ms", default=5000, show_default=True, help="Per-check solver timeout.")
@click.option("--fail-open", is_flag=True, help="Allow when the solver cannot decide.")
@click.option(
    "--semantics",
    type=click.Choice(["exists", "forall"]),
    default="exists",
    show_default=True,
)
@click.option("--minimize-cores", is_flag=True, help="Shrink unsat cores before explaining.")
@click.option("--audit-log", default=None, type=click.Path(), help="Append verdicts to a JSONL file.")
def check(
    package, call_json, state_json, session, solver, timeout_ms, fail_open, semantics,
    minimize_cores, audit_log,
) -> None:
    """Decide one proposed tool call: exit 0 allow, 3 block, 4 error."""
    pkg = _load_package_or_fail(package)
    raw_call = _read_json(call_json, "call")
    if not isinstance(raw_call, dict) or "tool_name" not in raw_call:
        raise OperationalError('call file must be an object with "tool_name"')
    call = ToolCall(
        tool_name=raw_call["tool_name"],
        arguments=raw_call.get("arguments", {}),
        call_id=str(raw_call.get("call_id", "cli")),
    )
    state = _parse_state(_read_json(state_json, "state"))
    config = GateConfig(
        fail_open=fail_open, semantics=semantics, minimize_cores=minimize_cores
    )
    sink = JsonlAuditLog(audit_log) if audit_log else None
    with _pool(solver, timeout_ms) as pool:
        engine = GateEngine(pkg, pool, config, audit_log=sink)
        verdict = engine.check_tool_call(call, state, SessionBudget(session))
    click.echo(json.dumps(verdict.to_dict(), indent=2))
    code = {
        Decision.ALLOW: EX_ALLOW,
        Decision.BLOCK: EX_BLOCK,
        Decision.ERROR: EX_ERROR,
    }[verdict.decision]
    sys.exit(code)


@cli.command()
@click.argument("package", type=click.Path(exists=True))
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["human", "json"]),
    default="human",
    show_default=True,
)
@click.option("--solver", default=None, help="Solver binary (defaults to $POLICY_GATE_SOLVER).")
def lint(package, fmt, solver) -> None:
    """Lint a package: exit 0 clean, 1 warnings, 2 errors."""
    pkg = _load_package_or_fail(package)
    probes = load_lint_manifest(package)
    with _pool(solver) as pool:
        findings = lint_package(pkg, pool, probes)
    if fmt == "json":
        click.echo(json.dumps([f.to_dict() for f in findings], indent=2))
    elif findings:
        width = max(len(f.severity) for f in findings)
        for f in findings:
            click.echo(f"{f.severity.ljust(width)}  {f.category:<12}  {f.subject}: {f.message}")
            if f.witness:
                click.echo(f"{'':{width}}  witness: {f.witness}")
    else:
        click.echo("clean: no findings")
    if any(f.severity == "error" for f in findings):
        sys.exit(2)
    if any(f.severity == "warning" for f in findings):
        sys.exit(1)
    sys.exit(0)


@cli.command("replay")
@click.argument("package", type=click.Path(exists=True))
@click.argument("trace", type=click.Path(exists=True))
@click.option("--baseline", is_flag=True, help="Count every call as made instead of gating.")
@click.option("--k", default=None, type=int, help="Largest k for pass^k (default: max valid).")
@click.option("--out", default=None, type=click.Path(), help="Write the JSON report here.")
@click.option("--solver", default=None, help="Solver binary (defaults to $POLICY_GATE_SOLVER).")
def replay_cmd(package, trace, baseline, k, out, solver) -> None:
    """Replay a labeled trace and report precision/recall and pass^k."""
    pkg = _load_package_or_fail(package)
    mode = "baseline" if baseline else "gated"
    try:
        if mode == "gated":
            with _pool(solver) as pool:
                report = replay(trace, pkg, mode, pool, k=k)
        else:
            report = replay(trace, pkg, mode, k=k)
    except MalformedTrace as exc:
        raise OperationalError(f"malformed trace: {exc}")
    click.echo(render_table([report]))
    decline = relative_decline(report)
    if decline is not None:
        click.echo(f"\npass^k decline ({mode}): {decline:.1%}")
    if out:
        Path(out).write_text(json.dumps(report.to_dict(), indent=2))
        click.echo(f"report written to {out}")


@cli.command()
@click.argument("package_dir", type=click.Path(exists=True))
@click.option(
    "--listen",
    default=None,
    help="host:port to bind (default $POLICY_GATE_LISTEN or 127.0.0.1:8099).",
)
@click.option("--solver", default=None, help="Solver binary (defaults to $POLICY_GATE_SOLVER).")
@click.option("--token-env", default=None, help="Env var holding the static bearer token.")
def serve(package_dir, listen, solver, token_env) -> None:
    """Serve the HTTP gate for one package or a directory of packages."""
    from .service import serve as run_service

    listen = listen or os.environ.get("POLICY_GATE_LISTEN", "127.0.0.1:8099")
    token = os.environ.get(token_env) if token_env else None
    try:
        run_service(package_dir, listen=listen, solver_binary=solver, auth_token=token)
    except (PackageNotFound, ValidationError, SolverSpawnError) as exc:
        raise OperationalError(str(exc))


def main(argv: list[str] | None = None) -> int:
    """Run the CLI programmatically; returns the exit code."""
    try:
        cli.main(args=argv, prog_name="policygate", standalone_mode=False)
        return 0
    except SystemExit as exc:
        return int(exc.code or 0)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        click.echo("run `policygate --help` for usage", err=True)
        return EX_USAGE
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return exc.exit_code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

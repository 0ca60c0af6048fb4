"""External SMT solver processes driven over stdin/stdout text pipes.

Any SMT-LIB 2.0 conformant solver binary works; the bundled default is the
z3 WebAssembly pipe wrapper under solver/ (see README). Responses are framed
with echo sentinels so multi-line output (cores, values) can be read safely.
"""

from __future__ import annotations

import itertools
import os
import queue
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .smtlib import (
    Assert,
    CheckSat,
    CheckStatus,
    GetUnsatCore,
    MalformedResponse,
    Script,
    SolverResponse,
    emit_command,
    parse_check_sat,
    parse_get_values,
    parse_unsat_core,
)

SOLVER_ENV_VAR = "POLICY_GATE_SOLVER"


class SolverSpawnError(Exception):
    """The solver binary could not be started."""


class SolverCrashed(Exception):
    """The solver exited before producing a status token."""


class SolverScriptError(Exception):
    """The solver reported an (error ...) while evaluating a script."""


class SolverUnavailable(Exception):
    """An operation that needs a solver could not obtain one."""


def default_solver_binary() -> str | None:
    """Resolve the solver binary: $POLICY_GATE_SOLVER, else the bundled pipe."""
    env = os.environ.get(SOLVER_ENV_VAR)
    if env:
        return env
    bundled = Path(__file__).resolve().parents[2] / "solver" / "z3pipe"
    if bundled.exists():
        return str(bundled)
    return None


@dataclass(frozen=True)
class SolverConfig:
    binary: str | None = None
    args: tuple[str, ...] = ()
    timeout_ms: int = 5000
    pool_size: int = 1
    produce_unsat_cores: bool = True

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")

    def resolve_binary(self) -> str:
        binary = self.binary or default_solver_binary()
        if not binary:
            raise SolverSpawnError(
                f"no solver binary configured; set {SOLVER_ENV_VAR} or install the "
                "bundled solver (npm install in solver/)"
            )
        return binary


@dataclass(frozen=True)
class CheckOutcome:
    response: SolverResponse
    wall_time_ms: float
    timed_out: bool = False
    solver_stderr: str = ""
    values: dict[str, object] | None = None

    def __post_init__(self) -> None:
        if self.timed_out and self.response.status is not CheckStatus.UNKNOWN:
            raise ValueError("timed-out checks must report Unknown")


class _TimeoutExpired(Exception):
    pass


_sentinel_ids = itertools.count(1)


class SolverProcess:
    """One solver subprocess with a line-reader thread."""

    def __init__(self, binary: str, args: Sequence[str]):
        try:
            self._proc = subprocess.Popen(
                [binary, *args],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise SolverSpawnError(f"cannot spawn solver {binary!r}: {exc}") from exc
        self.loaded_key: str | None = None
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._stderr: list[str] = []
        self._stdout_thread = threading.Thread(target=self._read_stdout, daemon=True)
        self._stderr_thread = threading.Thread(target=self._read_stderr, daemon=True)
        self._stdout_thread.start()
        self._stderr_thread.start()

    def _read_stdout(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line.rstrip("\n"))
        self._lines.put(None)

    def _read_stderr(self) -> None:
        assert self._proc.stderr is not None
        for line in self._proc.stderr:
            self._stderr.append(line.rstrip("\n"))

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None

    def stderr_text(self) -> str:
        return "\n".join(self._stderr)

    def send(self, text: str) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(text)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise SolverCrashed(f"solver pipe closed: {exc}") from exc

    def exchange(self, text: str, deadline: float) -> list[str]:
        """Send text followed by an echo sentinel; return lines up to it."""
        marker = f"POLICYGATE-DONE-{next(_sentinel_ids)}"
        self.send(text + f'\n(echo "{marker}")\n')
        lines: list[str] = []
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _TimeoutExpired()
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                raise _TimeoutExpired() from None
            if line is None:
                raise SolverCrashed(
                    "solver exited mid-response"
                    + (f": {self.stderr_text()}" if self._stderr else "")
                )
            if line.strip() == marker:
                return lines
            if line.strip():
                lines.append(line)

    def kill(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:  # pragma: no cover - kill is forceful
            pass
        for stream in (self._proc.stdin, self._proc.stdout, self._proc.stderr):
            if stream is not None:
                try:
                    stream.close()
                except OSError:
                    pass


@dataclass
class PoolStats:
    spawned: int = 0
    reaped: int = 0
    checks: int = 0


class SolverPool:
    """A pool of solver processes shared by concurrent checkers.

    Each check owns one process for its whole dialogue. Isolation is by
    (reset) for one-shot checks and push/pop around per-check suffixes for
    prefix-reusing sessions; any solver error triggers a reset.
    """

    def __init__(self, config: SolverConfig | None = None):
        self.config = config or SolverConfig()
        self._binary = self.config.resolve_binary()
        self._idle: list[SolverProcess] = []
        self._all: list[SolverProcess] = []
        self._active = 0
        self._closed = False
        self._cond = threading.Condition()
        self.stats = PoolStats()

    # -- process management

    def _spawn(self) -> SolverProcess:
        proc = SolverProcess(self._binary, self.config.args)
        self._all.append(proc)
        self.stats.spawned += 1
        return proc

    def _acquire(self, prefer_key: str | None = None) -> SolverProcess:
        with self._cond:
            while True:
                if self._closed:
                    raise SolverUnavailable("solver pool is closed")
                if self._idle:
                    if prefer_key is not None:
                        for i, proc in enumerate(self._idle):
                            if proc.loaded_key == prefer_key:
                                self._active += 1
                                return self._idle.pop(i)
                    self._active += 1
                    return self._idle.pop()
                if self._active < self.config.pool_size:
                    self._active += 1
                    break
                self._cond.wait()
        try:
            return self._spawn()
        except SolverSpawnError:
            with self._cond:
                self._active -= 1
                self._cond.notify()
            raise

    def _release(self, proc: SolverProcess, *, dead: bool = False) -> None:
        with self._cond:
            self._active -= 1
            if dead or not proc.alive or self._closed:
                self._reap(proc)
            else:
                self._idle.append(proc)
            self._cond.notify()

    def _reap(self, proc: SolverProcess) -> None:
        proc.kill()
        if proc in self._all:
            self._all.remove(proc)
            self.stats.reaped += 1

    def close(self) -> None:
        with self._cond:
            self._closed = True
            for proc in list(self._all):
                self._reap(proc)
            self._idle.clear()
            self._cond.notify_all()

    def live_processes(self) -> int:
        return sum(1 for p in self._all if p.alive)

    def __enter__(self) -> "SolverPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- checking

    def check(self, script: Script, *, timeout_ms: int | None = None) -> CheckOutcome:
        """Run one script in a fresh solver context and collect the outcome.

        The script may end with CheckSat (and optionally GetUnsatCore); the
        core is fetched whenever the result is unsat and cores are enabled or
        the script requested one.
        """
        script.validate()
        prefix_cmds = [c for c in script.commands if not isinstance(c, (CheckSat, GetUnsatCore))]
        wants_core = self.config.produce_unsat_cores or any(
            isinstance(c, GetUnsatCore) for c in script.commands
        )
        parts = ["(reset)"]
        if wants_core:
            parts.append("(set-option :produce-unsat-cores true)")
        parts.extend(emit_command(c) for c in prefix_cmds)
        parts.append("(check-sat)")
        return self._run_dialogue("\n".join(parts), wants_core, timeout_ms, prefer_key=None)

    def session(self, key: str, prefix: Script) -> "CheckSession":
        return CheckSession(self, key, prefix)

    def _run_dialogue(
        self,
        check_text: str,
        wants_core: bool,
        timeout_ms: int | None,
        prefer_key: str | None,
        prefix_loader: Callable[[SolverProcess, float], None] | None = None,
        suffix_cleanup: str | None = None,
        get_values: Sequence[str] = (),
    ) -> CheckOutcome:
        timeout = (timeout_ms if timeout_ms is not None else self.config.timeout_ms) / 1000.0
        proc = self._acquire(prefer_key)
        started = time.monotonic()
        deadline = started + timeout
        dead = False
        try:
            if prefix_loader is not None:
                prefix_loader(proc, deadline)
            else:
                # One-shot dialogues clobber the process state; any cached
                # session prefix must be reloaded afterwards.
                proc.loaded_key = None
            lines = proc.exchange(check_text, deadline)
            self.stats.checks += 1
            errors = [l for l in lines if l.lstrip().startswith("(error")]
            if errors:
                proc.exchange("(reset)", time.monotonic() + 5)
                proc.loaded_key = None
                raise SolverScriptError("\n".join(errors))
            if not lines:
                raise SolverCrashed("no status token in solver response")
            status = parse_check_sat(lines[-1])
            core: tuple[str, ...] | None = None
            values: dict[str, object] | None = None
            if status is CheckStatus.UNSAT and wants_core:
                core_lines = proc.exchange("(get-unsat-core)", deadline)
                core = tuple(parse_unsat_core("\n".join(core_lines)))
            if status is CheckStatus.SAT and get_values:
                value_lines = proc.exchange(f"(get-value ({' '.join(get_values)}))", deadline)
                values = parse_get_values("\n".join(value_lines))
            if suffix_cleanup:
                proc.exchange(suffix_cleanup, max(deadline, time.monotonic() + 5))
            wall = (time.monotonic() - started) * 1000.0
            raw = "\n".join(lines)
            return CheckOutcome(
                response=SolverResponse(status=status, core=core, raw=raw),
                wall_time_ms=wall,
                solver_stderr=proc.stderr_text(),
                values=values,
            )
        except _TimeoutExpired:
            dead = True
            proc.kill()
            wall = (time.monotonic() - started) * 1000.0
            return CheckOutcome(
                response=SolverResponse(status=CheckStatus.UNKNOWN, raw="timeout"),
                wall_time_ms=wall,
                timed_out=True,
                solver_stderr=proc.stderr_text(),
            )
        except (SolverCrashed, MalformedResponse):
            dead = True
            proc.kill()
            raise
        except SolverScriptError:
            raise
        except Exception:
            dead = True
            proc.kill()
            raise
        finally:
            self._release(proc, dead=dead)


class CheckSession:
    """Repeated checks against a fixed prefix (options, logic, encoding).

    The prefix is loaded once per process and reused across checks; each
    check pushes a frame, asserts its suffix, checks, and pops. This is the
    gate engine's warm path.
    """

    def __init__(self, pool: SolverPool, key: str, prefix: Script):
        self._pool = pool
        self._key = key
        prefix.validate()
        parts = []
        if pool.config.produce_unsat_cores:
            parts.append("(set-option :produce-unsat-cores true)")
        parts.extend(emit_command(c) for c in prefix.commands)
        self._prefix_text = "\n".join(parts)

    def _load_prefix(self, proc: SolverProcess, deadline: float) -> None:
        if proc.loaded_key == self._key:
            return
        lines = proc.exchange("(reset)\n" + self._prefix_text, deadline)
        errors = [l for l in lines if l.lstrip().startswith("(error")]
        if errors:
            proc.loaded_key = None
            raise SolverScriptError("\n".join(errors))
        proc.loaded_key = self._key

    def check(
        self,
        suffix: Iterable[Assert],
        *,
        timeout_ms: int | None = None,
        get_values: Sequence[str] = (),
    ) -> CheckOutcome:
        parts = ["(push 1)"]
        parts.extend(emit_command(c) for c in suffix)
        parts.append("(check-sat)")
        return self._pool._run_dialogue(
            "\n".join(parts),
            wants_core=self._pool.config.produce_unsat_cores,
            timeout_ms=timeout_ms,
            prefer_key=self._key,
            prefix_loader=self._load_prefix,
            suffix_cleanup="(pop 1)",
            get_values=get_values,
        )


def minimize_core(
    recheck: Callable[[Sequence[str]], CheckStatus], core: Sequence[str]
) -> list[str]:
    """Deletion-based core minimization: drop members while still unsat.

    `recheck(names)` must decide the script restricted to exactly those named
    assertions. The result is a minimal core: dropping any single member
    makes it satisfiable.
    """
    working = list(core)
    i = 0
    while i < len(working):
        candidate = working[:i] + working[i + 1 :]
        if candidate and recheck(candidate) is CheckStatus.UNSAT:
            working = candidate
        else:
            i += 1
    return working

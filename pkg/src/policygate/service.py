"""HTTP service exposing the policy gate: check verdicts, package listing and
atomic reload, and a solver health probe."""

from __future__ import annotations

import dataclasses
import os
import tempfile
import threading
import time
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request, Response
from pydantic import BaseModel, Field

from .extraction import ExtractorConfig, ObservableState, ToolCall
from .gate import GateConfig, GateEngine, JsonlAuditLog, MemoryAuditLog, SessionBudget
from .policy import (
    MalformedSchemaFile,
    PackageNotFound,
    PolicyRegistry,
    ValidationError,
    load_package,
    validate_package,
)
from .smtlib import Assert, CheckSat, Script, lit
from .solver import SolverPool, SolverUnavailable

SESSION_IDLE_TTL_S = 30 * 60


class WireToolCall(BaseModel):
    tool_name: str
    arguments: dict = Field(default_factory=dict)
    call_id: str = ""


class WireState(BaseModel):
    data: dict = Field(default_factory=dict)
    turn_index: int = 0


class GateRequest(BaseModel):
    session_id: str
    policy_id: str
    tool_call: WireToolCall
    state: WireState = Field(default_factory=WireState)


class GateResponse(BaseModel):
    decision: str
    reason: str
    explanation: str
    core: list[str]
    retry_allowed: bool
    attempt: int


class ServiceState:
    """Shared service state: registry, engines, session budgets with TTL."""

    def __init__(
        self,
        registry: PolicyRegistry,
        pool: SolverPool,
        gate_config: GateConfig | None = None,
        extractor: ExtractorConfig | None = None,
        audit_log: JsonlAuditLog | MemoryAuditLog | None = None,
        queue_depth: int = 16,
    ):
        self.registry = registry
        self.pool = pool
        self.gate_config = gate_config or GateConfig()
        self.extractor = extractor or ExtractorConfig()
        self.audit_log = audit_log
        self._engines: dict[str, GateEngine] = {}
        self._budgets: dict[str, tuple[SessionBudget, float]] = {}
        self._lock = threading.Lock()
        # Backpressure: at most pool_size in-flight checks plus a bounded queue.
        self._slots = threading.BoundedSemaphore(pool.config.pool_size + queue_depth)

    def engine_for(self, policy_id: str) -> GateEngine | None:
        pkg = self.registry.get(policy_id)
        if pkg is None:
            return None
        with self._lock:
            engine = self._engines.get(policy_id)
            if engine is None or engine.pkg is not pkg:
                engine = GateEngine(
                    pkg,
                    self.pool,
                    self.gate_config,
                    extractor=self.extractor,
                    audit_log=self.audit_log,
                )
                self._engines[policy_id] = engine
            return engine

    def budget_for(self, session_id: str) -> SessionBudget:
        now = time.monotonic()
        with self._lock:
            stale = [
                sid
                for sid, (_, seen) in self._budgets.items()
                if now - seen > SESSION_IDLE_TTL_S
            ]
            for sid in stale:
                del self._budgets[sid]
            budget, _ = self._budgets.get(
                session_id,
                (SessionBudget(session_id, self.gate_config.max_attempts), now),
            )
            self._budgets[session_id] = (budget, now)
            return budget

    def acquire_slot(self) -> bool:
        return self._slots.acquire(blocking=False)

    def release_slot(self) -> None:
        self._slots.release()


def create_app(state: ServiceState, auth_token: str | None = None) -> FastAPI:
    app = FastAPI(title="policygate", version="0.1.0")

    def require_auth(request: Request) -> None:
        if auth_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {auth_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.post("/v1/check", response_model=GateResponse, dependencies=[Depends(require_auth)])
    def check(request: GateRequest) -> GateResponse:
        engine = state.engine_for(request.policy_id)
        if engine is None:
            raise HTTPException(status_code=404, detail=f"unknown policy {request.policy_id}")
        if not state.acquire_slot():
            raise HTTPException(status_code=503, detail="checker at capacity, retry later")
        try:
            call = ToolCall(
                tool_name=request.tool_call.tool_name,
                arguments=request.tool_call.arguments,
                call_id=request.tool_call.call_id,
            )
            obs = ObservableState(
                data=request.state.data, turn_index=request.state.turn_index
            )
            budget = state.budget_for(request.session_id)
            verdict = engine.check_tool_call(call, obs, budget)
        finally:
            state.release_slot()
        return GateResponse(
            decision=verdict.decision.value,
            reason=verdict.reason.value,
            explanation=verdict.explanation,
            core=list(verdict.core),
            retry_allowed=verdict.retry_allowed,
            attempt=verdict.attempt,
        )

    @app.get("/v1/policies", dependencies=[Depends(require_auth)])
    def list_policies() -> list[dict]:
        return [
            {"id": pkg.id, "version": pkg.version, "tool_count": pkg.tool_count}
            for pkg in state.registry.all()
        ]

    @app.put("/v1/policies/{policy_id}", dependencies=[Depends(require_auth)])
    async def put_policy(policy_id: str, request: Request) -> dict:
        body = await request.body()
        if not body:
            raise HTTPException(status_code=422, detail="empty package archive")
        with tempfile.NamedTemporaryFile(suffix=".zip", delete=False) as tmp:
            tmp.write(body)
            tmp_path = Path(tmp.name)
        try:
            try:
                pkg = load_package(tmp_path)
            except ValidationError as exc:
                raise HTTPException(
                    status_code=409,
                    detail={"violations": [str(v) for v in exc.violations]},
                )
            except (PackageNotFound, MalformedSchemaFile) as exc:
                raise HTTPException(status_code=409, detail={"violations": [str(exc)]})
            pkg = dataclasses.replace(pkg, id=policy_id)
            try:
                violations = validate_package(pkg, state.pool)
            except SolverUnavailable as exc:
                raise HTTPException(status_code=503, detail=str(exc))
            if violations:
                raise HTTPException(
                    status_code=409,
                    detail={"violations": [str(v) for v in violations]},
                )
            state.registry.put(pkg)  # atomic swap; new checks see the new package
            return {"id": pkg.id, "version": pkg.version, "tool_count": pkg.tool_count}
        finally:
            tmp_path.unlink(missing_ok=True)

    @app.get("/healthz")
    def healthz(response: Response) -> dict:
        probe = Script((Assert(lit(True)), CheckSat()))
        try:
            outcome = state.pool.check(probe, timeout_ms=1000)
        except Exception:
            response.status_code = 503
            return {"status": "solver unavailable"}
        if outcome.timed_out:
            response.status_code = 503
            return {"status": "solver timeout"}
        return {"status": "ok"}

    return app


def build_registry(package_root: str | Path) -> PolicyRegistry:
    """Load one package (dir with policy.smt2) or every package subdirectory."""
    root = Path(package_root)
    registry = PolicyRegistry()
    if (root / "policy.smt2").exists():
        registry.put(load_package(root))
        return registry
    loaded = 0
    for child in sorted(root.iterdir()) if root.is_dir() else []:
        if child.is_dir() and (child / "policy.smt2").exists():
            registry.put(load_package(child))
            loaded += 1
    if loaded == 0:
        raise PackageNotFound(f"no policy packages under {root}")
    return registry


def serve(
    package_root: str | Path,
    listen: str = "127.0.0.1:8099",
    solver_binary: str | None = None,
    auth_token: str | None = None,
) -> None:
    """Run the HTTP gate service; fails fast if the solver cannot start."""
    import uvicorn

    from .solver import SolverConfig

    registry = build_registry(package_root)
    pool = SolverPool(SolverConfig(binary=solver_binary, pool_size=max(os.cpu_count() or 1, 1)))
    probe = Script((Assert(lit(True)), CheckSat()))
    pool.check(probe)  # raises SolverSpawnError if the binary is absent
    state = ServiceState(registry, pool)
    app = create_app(state, auth_token=auth_token)
    host, _, port = listen.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))

"""Acceptance suite: one test per criterion, each at its stated tolerance.

The randomized oracle-equivalence run is shared between the equivalence and
core-soundness criteria via a session fixture; everything else drives the
bundled fixtures end to end.
"""

import random
import statistics
import time
from dataclasses import dataclass

import pytest
from fastapi.testclient import TestClient

from policygate.extraction import ObservableState, ToolCall
from policygate.gate import (
    Decision,
    GateConfig,
    GateEngine,
    Reason,
    SessionBudget,
    core_subset_script,
)
from policygate.lint import lint_tightness, load_lint_manifest, witness_call
from policygate.policy import load_package
from policygate.replay import TaskTrial, pass_hat_k, replay
from policygate.service import ServiceState, build_registry, create_app
from policygate.smtlib import CheckStatus
from policygate.solver import minimize_core
from conftest import FIXTURES
from oracle import load_oracle
from test_gate import slow_package

SUITE_SEED = 20250811
INSTANCES_PER_FIXTURE = 1000


def _set_path(root: dict, path: str, value: object) -> None:
    parts = path.split(".")
    current = root
    for part in parts[:-1]:
        current = current.setdefault(part, {})
    current[parts[-1]] = value


@dataclass
class BlockedInstance:
    fixture: str
    tool: str
    bindings: dict
    core: tuple


@dataclass
class SuiteResult:
    fixture: str
    package: object
    instances: int
    mismatches: list
    errors: list
    blocks: list
    runtime_s: float


def run_randomized_suite(fixture_dir, pool, n_instances) -> SuiteResult:
    pkg = load_package(fixture_dir)
    oracle = load_oracle(fixture_dir)
    engine = GateEngine(pkg, pool)
    rng = random.Random(f"{SUITE_SEED}:{pkg.id}")
    schemas = [s for s in pkg.schemas.values() if s.designated_predicate is not None]
    domains = oracle.domains

    mismatches, errors, blocks = [], [], []
    started = time.monotonic()
    for index in range(n_instances):
        schema = rng.choice(schemas)
        arguments, state_data, bound = {}, {}, {}
        for var in schema.variables:
            if rng.random() >= 0.55:
                continue  # leave unbound: the solver treats it as free
            value = rng.choice(domains[var.name])
            bound[var.name] = value
            target = arguments if var.source.kind == "tool_arg" else state_data
            _set_path(target, var.source.path, value)
        call = ToolCall(schema.tool_name, arguments, call_id=f"{pkg.id}-{index}")
        verdict = engine.check_tool_call(
            call, ObservableState(data=state_data), SessionBudget(f"suite-{index}")
        )
        expected_allow = oracle.exists_allowing(bound, schema.designated_predicate)
        if verdict.decision is Decision.ERROR:
            errors.append((index, schema.tool_name, bound, verdict.explanation))
        elif (verdict.decision is Decision.ALLOW) != expected_allow:
            mismatches.append((index, schema.tool_name, bound, verdict.decision))
        if verdict.decision is Decision.BLOCK and verdict.reason is Reason.UNSAT:
            blocks.append(BlockedInstance(pkg.id, schema.tool_name, bound, verdict.core))
    return SuiteResult(
        fixture=pkg.id,
        package=pkg,
        instances=n_instances,
        mismatches=mismatches,
        errors=errors,
        blocks=blocks,
        runtime_s=time.monotonic() - started,
    )


@pytest.fixture(scope="session")
def randomized_suite(pool, oracle_fixture_dirs):
    return [
        run_randomized_suite(d, pool, INSTANCES_PER_FIXTURE) for d in oracle_fixture_dirs
    ]


def test_oracle_equivalence(randomized_suite):
    """Gate verdicts match the brute-force existential oracle on 100% of
    randomized instances across >=3 finite-domain fixtures, within 60 s."""
    assert len(randomized_suite) >= 3
    total_runtime = sum(r.runtime_s for r in randomized_suite)
    for result in randomized_suite:
        assert result.instances == INSTANCES_PER_FIXTURE
        assert result.errors == [], f"{result.fixture}: gate errors {result.errors[:3]}"
        assert result.mismatches == [], (
            f"{result.fixture}: {len(result.mismatches)} oracle disagreements, "
            f"first: {result.mismatches[:3]}"
        )
    assert total_runtime < 60.0, f"randomized suite took {total_runtime:.1f}s"


def test_core_soundness(randomized_suite, pool):
    """Every Block/unsat core re-checks unsat alone; minimized cores are
    minimal (dropping any single member yields sat) on >=100 sampled blocks."""
    all_blocks = [b for result in randomized_suite for b in result.blocks]
    assert len(all_blocks) >= 100, f"only {len(all_blocks)} blocks in the suite"
    packages = {r.fixture: r.package for r in randomized_suite}

    for block in all_blocks:
        pkg = packages[block.fixture]
        schema = pkg.schema_for(block.tool)
        from policygate.extraction import BindingSet

        bindings = BindingSet(
            bindings=block.bindings,
            missing=tuple(
                v.name for v in schema.variables if v.name not in block.bindings
            ),
        )
        script = core_subset_script(pkg, schema, bindings, block.core)
        assert pool.check(script).response.status is CheckStatus.UNSAT, (
            f"{block.fixture}/{block.tool}: core {block.core} not unsat alone"
        )

    rng = random.Random(SUITE_SEED)
    sample = rng.sample(all_blocks, 100)
    for block in sample:
        pkg = packages[block.fixture]
        schema = pkg.schema_for(block.tool)
        from policygate.extraction import BindingSet

        bindings = BindingSet(
            bindings=block.bindings,
            missing=tuple(
                v.name for v in schema.variables if v.name not in block.bindings
            ),
        )

        def status_of(names):
            return pool.check(
                core_subset_script(pkg, schema, bindings, names)
            ).response.status

        minimal = minimize_core(status_of, list(block.core))
        assert minimal, "minimization emptied a core"
        for name in minimal:
            rest = [n for n in minimal if n != name]
            assert status_of(rest) is CheckStatus.SAT, (
                f"{block.fixture}/{block.tool}: minimized core {minimal} kept "
                f"redundant member {name}"
            )


CANCEL_CALL = ToolCall("cancel_reservation", {"reservation_id": "R1"}, call_id="accept")


def _cancel_state(age_seconds: int) -> ObservableState:
    now = 1_700_003_600
    return ObservableState(
        data={
            "now": now,
            "user": {"verified": True},
            "reservations": {
                "R1": {"booked_at": now - age_seconds, "flown": False, "cabin": "economy"}
            },
        }
    )


def test_paper_behavior_fixtures(mini_airline, pool):
    """Cancellation allowed at 43,200 s and blocked at 172,800 s of booking
    age; empty-schema tools trigger zero solver calls."""
    engine = GateEngine(mini_airline, pool)
    budget = SessionBudget("paper-behavior")

    allowed = engine.check_tool_call(CANCEL_CALL, _cancel_state(43_200), budget)
    assert allowed.decision is Decision.ALLOW and allowed.reason is Reason.SAT

    blocked = engine.check_tool_call(CANCEL_CALL, _cancel_state(172_800), budget)
    assert blocked.decision is Decision.BLOCK and blocked.reason is Reason.UNSAT
    assert "rule_cancel_window" in blocked.core
    assert "bind_booking_age_seconds" in blocked.core

    checks_before = pool.stats.checks
    bypass = engine.check_tool_call(
        ToolCall("get_user_details", {"user_id": "u1"}), _cancel_state(0), budget
    )
    assert bypass.decision is Decision.ALLOW
    assert bypass.reason is Reason.UNCONDITIONAL_ALLOW
    assert pool.stats.checks == checks_before, "empty schema must bypass the solver"


def test_retry_bound(mini_airline, pool):
    """Three consecutive blocks for one tool in one session flip retry_allowed
    to false; an intervening allow resets the counter. Exact."""
    engine = GateEngine(mini_airline, pool)
    budget = SessionBudget("retry-bound")
    blocked_state = _cancel_state(172_800)

    flags = [
        engine.check_tool_call(CANCEL_CALL, blocked_state, budget).retry_allowed
        for _ in range(3)
    ]
    assert flags == [True, True, False]

    budget = SessionBudget("retry-reset")
    engine.check_tool_call(CANCEL_CALL, blocked_state, budget)
    engine.check_tool_call(CANCEL_CALL, blocked_state, budget)
    engine.check_tool_call(CANCEL_CALL, _cancel_state(43_200), budget)  # resets
    again = engine.check_tool_call(CANCEL_CALL, blocked_state, budget)
    assert again.attempt == 1 and again.retry_allowed is True


def test_tightness_lint(pool):
    """The one-directional fixture yields exactly one tightness warning whose
    witness replays to Allow; the biconditional fixture yields none."""
    oneway_dir = FIXTURES / "lint" / "oneway_cancel"
    oneway = load_package(oneway_dir)
    findings = lint_tightness(oneway, pool, load_lint_manifest(oneway_dir))
    assert len(findings) == 1
    finding = findings[0]
    assert finding.category == "tightness" and finding.severity == "warning"

    schema = oneway.schema_for("cancel_reservation")
    call, state = witness_call(schema, finding.witness_values)
    verdict = GateEngine(oneway, pool).check_tool_call(
        call, state, SessionBudget("witness")
    )
    assert verdict.decision is Decision.ALLOW, "witness must be a concrete exploit"

    tight_dir = FIXTURES / "lint" / "biconditional_cancel"
    tight = load_package(tight_dir)
    assert lint_tightness(tight, pool, load_lint_manifest(tight_dir)) == []


def test_metrics_fidelity(mini_airline, pool):
    """pass_hat_k matches closed form to 1e-12; the bundled baseline trace
    yields precision exactly 0.50 and the gated trace 9/11 with strictly
    lower recall."""
    full = [TaskTrial("t", i, True) for i in range(4)]
    for k in range(1, 5):
        assert abs(pass_hat_k(full, k) - 1.0) < 1e-12
    half = [TaskTrial("t", i, i < 2) for i in range(4)]
    assert abs(pass_hat_k(half, 2) - 1 / 6) < 1e-12
    none = [TaskTrial("t", i, False) for i in range(4)]
    for k in range(1, 5):
        assert abs(pass_hat_k(none, k) - 0.0) < 1e-12

    trace = FIXTURES / "traces" / "write_calls.jsonl"
    baseline = replay(trace, mini_airline, "baseline")
    gated = replay(trace, mini_airline, "gated", pool)
    assert baseline.precision == 0.5
    assert gated.precision == 9 / 11
    assert gated.recall < baseline.recall


def test_fail_closed_behavior(pool):
    """A forced 1 ms solver timeout blocks under the default configuration
    and allows under fail-open. Exact."""
    pkg = slow_package()
    call = ToolCall("burn_cpu", {}, call_id="timeout")

    closed = GateEngine(pkg, pool, GateConfig(check_timeout_ms=1))
    verdict = closed.check_tool_call(call, ObservableState(), SessionBudget("closed"))
    assert verdict.decision is Decision.BLOCK
    assert verdict.reason is Reason.SOLVER_UNKNOWN

    opened = GateEngine(pkg, pool, GateConfig(check_timeout_ms=1, fail_open=True))
    verdict = opened.check_tool_call(call, ObservableState(), SessionBudget("open"))
    assert verdict.decision is Decision.ALLOW
    assert verdict.reason is Reason.SOLVER_UNKNOWN


def test_check_latency_slo(pool):
    """Engineering SLO, not a reported result: warm-path POST /v1/check
    median latency stays under 50 ms on the mini-airline package."""
    registry = build_registry(FIXTURES / "mini_airline")
    state = ServiceState(registry, pool)
    client = TestClient(create_app(state))
    body = {
        "session_id": "slo",
        "policy_id": "mini-airline",
        "tool_call": {
            "tool_name": "cancel_reservation",
            "arguments": {"reservation_id": "R1"},
            "call_id": "slo",
        },
        "state": {"data": dict(_cancel_state(43_200).data), "turn_index": 0},
    }
    for _ in range(5):  # warm the solver process and the HTTP stack
        assert client.post("/v1/check", json=body).status_code == 200
    samples = []
    for _ in range(41):
        start = time.perf_counter()
        response = client.post("/v1/check", json=body)
        samples.append((time.perf_counter() - start) * 1000.0)
        assert response.status_code == 200
    median = statistics.median(samples)
    assert median < 50.0, f"median /v1/check latency {median:.1f} ms"

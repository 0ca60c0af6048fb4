import dataclasses
import json

import pytest

from policygate.extraction import BindingSet, ExtractorConfig, ObservableState, ToolCall
from policygate.gate import (
    Decision,
    GateConfig,
    GateEngine,
    JsonlAuditLog,
    Reason,
    SessionBudget,
    UnknownRuleName,
    build_check_script,
    core_subset_script,
    explain,
    note_block_and_escalate,
)
from policygate.policy import scan_encoding, PolicyPackage, ToolSchema, VariableSpec, VariableSource
from policygate.smtlib import (
    Assert,
    CheckSat,
    CheckStatus,
    GetUnsatCore,
    BOOL,
    emit_script,
)
from test_solver_backend import pigeonhole_script


STATE_12H = ObservableState(
    data={
        "now": 1_700_003_600,
        "user": {"verified": True},
        "reservations": {"R1": {"booked_at": 1_699_960_400, "flown": False, "cabin": "economy"}},
    }
)
STATE_48H = ObservableState(
    data={
        "now": 1_700_003_600,
        "user": {"verified": True},
        "reservations": {"R1": {"booked_at": 1_699_830_800, "flown": False, "cabin": "economy"}},
    }
)


def cancel_call():
    return ToolCall("cancel_reservation", {"reservation_id": "R1"}, call_id="call-1")


@pytest.fixture()
def engine(mini_airline, pool):
    return GateEngine(mini_airline, pool)


@pytest.fixture()
def budget():
    return SessionBudget("session-1")


class TestBuildScript:
    def test_command_sequence(self, mini_airline):
        schema = mini_airline.schema_for("cancel_reservation")
        bindings = BindingSet(bindings={"booking_age_seconds": 43_200}, missing=())
        script = build_check_script(mini_airline, schema, bindings)
        tail = script.commands[-4:]
        assert isinstance(tail[0], Assert) and tail[0].name == "bind_booking_age_seconds"
        assert isinstance(tail[1], Assert) and tail[1].name == "goal_cancel_reservation"
        assert isinstance(tail[2], CheckSat)
        assert isinstance(tail[3], GetUnsatCore)
        text = emit_script(script)
        assert "(assert (! (= booking_age_seconds 43200) :named bind_booking_age_seconds))" in text
        assert "(assert (! allow_cancel :named goal_cancel_reservation))" in text

    def test_unbound_variables_stay_free(self, mini_airline):
        schema = mini_airline.schema_for("book_reservation")
        script = build_check_script(mini_airline, schema, BindingSet())
        text = emit_script(script)
        assert "bind_" not in text
        assert text.count("goal_") == 1

    def test_enum_binding_uses_bare_constructor(self, mini_airline):
        schema = mini_airline.schema_for("upgrade_cabin")
        bindings = BindingSet(
            bindings={"cabin": "economy"},
            missing=("user_verified", "target_cabin", "seats_available"),
        )
        text = emit_script(build_check_script(mini_airline, schema, bindings))
        assert "(assert (! (= cabin economy) :named bind_cabin))" in text
        assert '"economy"' not in text


class TestCheckToolCall:
    def test_allow_within_window(self, engine, budget):
        verdict = engine.check_tool_call(cancel_call(), STATE_12H, budget)
        assert verdict.decision is Decision.ALLOW
        assert verdict.reason is Reason.SAT
        assert verdict.outcome is not None

    def test_block_outside_window_with_core(self, engine, budget):
        verdict = engine.check_tool_call(cancel_call(), STATE_48H, budget)
        assert verdict.decision is Decision.BLOCK
        assert verdict.reason is Reason.UNSAT
        assert "rule_cancel_window" in verdict.core
        assert "bind_booking_age_seconds" in verdict.core
        assert "rule_cancel_window" in verdict.explanation
        assert "booking_age_seconds" in verdict.explanation

    def test_empty_schema_skips_solver(self, engine, budget):
        before = engine.pool.stats.checks
        verdict = engine.check_tool_call(
            ToolCall("get_user_details", {"user_id": "u1"}), STATE_12H, budget
        )
        assert verdict.decision is Decision.ALLOW
        assert verdict.reason is Reason.UNCONDITIONAL_ALLOW
        assert engine.pool.stats.checks == before

    def test_unknown_tool_blocks_by_default(self, engine, budget):
        verdict = engine.check_tool_call(ToolCall("rm_rf"), STATE_12H, budget)
        assert verdict.decision is Decision.BLOCK
        assert verdict.reason is Reason.UNKNOWN_TOOL

    def test_unknown_tool_allow_default(self, mini_airline, pool, budget):
        permissive = dataclasses.replace(mini_airline, unknown_tool_default="allow")
        engine = GateEngine(permissive, pool)
        verdict = engine.check_tool_call(ToolCall("rm_rf"), STATE_12H, budget)
        assert verdict.decision is Decision.ALLOW
        assert verdict.reason is Reason.UNKNOWN_TOOL

    def test_missing_required_blocks(self, engine, budget):
        call = ToolCall("cancel_reservation", {"reservation_id": "R404"})
        verdict = engine.check_tool_call(call, STATE_12H, budget)
        assert verdict.decision is Decision.BLOCK
        assert verdict.reason is Reason.MISSING_REQUIRED
        assert "booking_age_seconds" in verdict.explanation

    def test_type_mismatch_blocks(self, engine, budget):
        call = ToolCall("upgrade_cabin", {"reservation_id": "R1", "target_cabin": "first"})
        verdict = engine.check_tool_call(call, STATE_12H, budget)
        assert verdict.decision is Decision.BLOCK
        assert verdict.reason is Reason.TYPE_MISMATCH
        assert "target_cabin" in verdict.explanation

    def test_never_raises_on_extractor_outage(self, mini_airline, pool, budget):
        engine = GateEngine(
            mini_airline,
            pool,
            extractor=ExtractorConfig(
                kind="remote", endpoint="http://127.0.0.1:1/unreachable", timeout_ms=200
            ),
        )
        verdict = engine.check_tool_call(cancel_call(), STATE_12H, budget)
        assert verdict.decision is Decision.ERROR
        assert verdict.reason is Reason.EXTRACTOR_FAILURE

    def test_default_config_allow_reason_invariant(self, engine, budget):
        for call, state in [
            (cancel_call(), STATE_12H),
            (cancel_call(), STATE_48H),
            (ToolCall("get_user_details"), STATE_12H),
            (ToolCall("unknown_tool"), STATE_12H),
        ]:
            verdict = engine.check_tool_call(call, state, budget)
            assert (verdict.decision is Decision.ALLOW) == (
                verdict.reason in (Reason.UNCONDITIONAL_ALLOW, Reason.SAT)
            )


def slow_package() -> PolicyPackage:
    """A package whose every check drags the solver through a pigeonhole proof."""
    lines = []
    php = pigeonhole_script(holes=11)
    for cmd in php.commands[:-1]:  # drop CheckSat
        if isinstance(cmd, Assert):
            lines.append(f"(assert (! {emit_script_term(cmd)} :named rule_php_{len(lines)}))")
        else:
            lines.append(emit_command_text(cmd))
    lines.append("(declare-const allow_burn Bool)")
    encoding, violations = scan_encoding("\n".join(lines) + "\n")
    assert not violations
    schema = ToolSchema(
        tool_name="burn_cpu",
        variables=(
            VariableSpec("allow_burn", BOOL, VariableSource("state", "burn"), required=False),
        ),
        designated_predicate="allow_burn",
        write_tool=True,
    )
    return PolicyPackage(
        id="slow", version="1", encoding=encoding, schemas={"burn_cpu": schema}
    )


def emit_script_term(cmd: Assert) -> str:
    from policygate.smtlib import emit_term

    return emit_term(cmd.term)


def emit_command_text(cmd) -> str:
    from policygate.smtlib import emit_command

    return emit_command(cmd)


@pytest.fixture(scope="module")
def slow_pkg():
    return slow_package()


class TestFailModes:
    def test_fail_closed_on_timeout(self, pool, slow_pkg, budget):
        engine = GateEngine(slow_pkg, pool, GateConfig(check_timeout_ms=1))
        verdict = engine.check_tool_call(ToolCall("burn_cpu"), ObservableState(), budget)
        assert verdict.decision is Decision.BLOCK
        assert verdict.reason is Reason.SOLVER_UNKNOWN
        assert verdict.outcome is not None and verdict.outcome.timed_out

    def test_fail_open_on_timeout(self, pool, slow_pkg, budget):
        engine = GateEngine(
            slow_pkg, pool, GateConfig(check_timeout_ms=1, fail_open=True)
        )
        verdict = engine.check_tool_call(ToolCall("burn_cpu"), ObservableState(), budget)
        assert verdict.decision is Decision.ALLOW
        assert verdict.reason is Reason.SOLVER_UNKNOWN


class TestRetryBudget:
    def test_three_blocks_exhaust_budget(self, engine, budget):
        verdicts = [
            engine.check_tool_call(cancel_call(), STATE_48H, budget) for _ in range(3)
        ]
        assert [v.attempt for v in verdicts] == [1, 2, 3]
        assert [v.retry_allowed for v in verdicts] == [True, True, False]

    def test_allow_resets_counter(self, engine, budget):
        engine.check_tool_call(cancel_call(), STATE_48H, budget)
        engine.check_tool_call(cancel_call(), STATE_48H, budget)
        allowed = engine.check_tool_call(cancel_call(), STATE_12H, budget)
        assert allowed.decision is Decision.ALLOW
        assert budget.attempts("cancel_reservation") == 0
        blocked = engine.check_tool_call(cancel_call(), STATE_48H, budget)
        assert blocked.attempt == 1 and blocked.retry_allowed

    def test_tools_tracked_independently(self, engine, budget):
        engine.check_tool_call(cancel_call(), STATE_48H, budget)
        engine.check_tool_call(cancel_call(), STATE_48H, budget)
        other = ToolCall("add_baggage", {"checked_bags": 9})
        blocked_other = engine.check_tool_call(other, STATE_12H, budget)
        assert blocked_other.decision is Decision.BLOCK
        assert blocked_other.attempt == 1
        assert budget.attempts("cancel_reservation") == 2
        assert budget.attempts("add_baggage") == 1

    def test_note_block_and_escalate_contract(self):
        session = SessionBudget("s", max_attempts=3)
        assert note_block_and_escalate(session, "t") == {"retry_allowed": True}
        assert note_block_and_escalate(session, "t") == {"retry_allowed": True}
        assert note_block_and_escalate(session, "t") == {"retry_allowed": False}


class TestExplain:
    def test_rule_and_binding(self, mini_airline):
        text = explain(["rule_cancel_window", "bind_booking_age_seconds"], mini_airline)
        assert "rule_cancel_window" in text
        assert "booking_age_seconds" in text
        assert text == explain(["rule_cancel_window", "bind_booking_age_seconds"], mini_airline)

    def test_rules_only(self, mini_airline):
        text = explain(["rule_cancel_window", "rule_book_requirements"], mini_airline)
        assert "rule_book_requirements" in text
        assert "observed values" not in text

    def test_unknown_name(self, mini_airline):
        with pytest.raises(UnknownRuleName):
            explain(["nonexistent"], mini_airline)


class TestForallSemantics:
    def test_unbound_variable_blocks_under_forall(self, mini_airline, pool, budget):
        engine = GateEngine(mini_airline, pool, GateConfig(semantics="forall"))
        state = ObservableState(
            data={
                "now": STATE_12H.data["now"],
                "reservations": STATE_12H.data["reservations"],
            }
        )  # user.verified unknown: some completion denies the cancel
        verdict = engine.check_tool_call(cancel_call(), state, budget)
        assert verdict.decision is Decision.BLOCK
        assert verdict.reason is Reason.NOT_ENTAILED

    def test_fully_bound_allow_under_forall(self, mini_airline, pool, budget):
        engine = GateEngine(mini_airline, pool, GateConfig(semantics="forall"))
        verdict = engine.check_tool_call(cancel_call(), STATE_12H, budget)
        assert verdict.decision is Decision.ALLOW
        assert verdict.reason is Reason.SAT


class TestMinimizedCores:
    def test_minimized_core_is_minimal(self, mini_airline, pool, budget):
        engine = GateEngine(mini_airline, pool, GateConfig(minimize_cores=True))
        call = ToolCall("issue_refund", {"reservation_id": "R1", "amount_cents": 60_001})
        state = ObservableState(
            data={
                "now": 1_700_003_600,
                "user": {"verified": True, "membership": "regular"},
                "reservations": {"R1": {"booked_at": 1_699_960_400}},
            }
        )
        verdict = engine.check_tool_call(call, state, budget)
        assert verdict.decision is Decision.BLOCK and verdict.reason is Reason.UNSAT
        schema = mini_airline.schema_for("issue_refund")
        from policygate.extraction import extract

        bindings = extract(schema, call, state)
        # Dropping any single member of a minimal core restores satisfiability.
        for name in verdict.core:
            rest = [n for n in verdict.core if n != name]
            outcome = pool.check(core_subset_script(mini_airline, schema, bindings, rest))
            assert outcome.response.status is CheckStatus.SAT, name


class TestAudit:
    def test_every_check_appends_one_record(self, mini_airline, pool, tmp_path, budget):
        log_path = tmp_path / "audit.jsonl"
        engine = GateEngine(mini_airline, pool, audit_log=JsonlAuditLog(str(log_path)))
        calls = [
            (cancel_call(), STATE_12H),  # allow
            (cancel_call(), STATE_48H),  # block
            (ToolCall("get_user_details"), STATE_12H),  # empty schema
            (ToolCall("unknown_tool"), STATE_12H),  # unknown
        ]
        for call, state in calls:
            engine.check_tool_call(call, state, budget)
        lines = log_path.read_text().strip().splitlines()
        assert len(lines) == len(calls)
        records = [json.loads(line) for line in lines]
        assert [r["decision"] for r in records] == ["allow", "block", "allow", "block"]
        assert records[0]["script_sha256"]  # solver paths carry the script hash
        assert records[1]["core"]
        assert all(r["session_id"] == "session-1" for r in records)

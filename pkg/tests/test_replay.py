import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policygate.replay import (
    InsufficientTrials,
    MalformedTrace,
    MetricsReport,
    TaskTrial,
    compare,
    parse_trace,
    pass_hat_k,
    relative_decline,
    render_table,
    replay,
)
from conftest import FIXTURES

WRITE_TRACE = FIXTURES / "traces" / "write_calls.jsonl"
CONSISTENCY_TRACE = FIXTURES / "traces" / "consistency.jsonl"


class TestPassHatK:
    def test_all_trials_succeed(self):
        trials = [TaskTrial("t", i, True) for i in range(4)]
        for k in range(1, 5):
            assert pass_hat_k(trials, k) == 1.0

    def test_two_of_four(self):
        trials = [TaskTrial("t", i, i < 2) for i in range(4)]
        assert abs(pass_hat_k(trials, 2) - 1 / 6) < 1e-12

    def test_zero_successes(self):
        trials = [TaskTrial("t", i, False) for i in range(4)]
        for k in range(1, 5):
            assert pass_hat_k(trials, k) == 0.0

    def test_insufficient_trials(self):
        trials = [TaskTrial("t", 0, True)]
        with pytest.raises(InsufficientTrials):
            pass_hat_k(trials, 2)

    @settings(max_examples=80, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(1, 6), st.integers(0, 6)).map(
                lambda pair: (max(pair), min(pair))
            ),
            min_size=1,
            max_size=5,
        )
    )
    def test_monotone_nonincreasing_in_k(self, tasks):
        trials = []
        for i, (n, c) in enumerate(tasks):
            trials.extend(TaskTrial(f"task{i}", j, j < c) for j in range(n))
        max_k = min(n for n, _ in tasks)
        values = [pass_hat_k(trials, k) for k in range(1, max_k + 1)]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(1, 6), st.integers(0, 6)).map(
                lambda pair: (max(pair), min(pair))
            ),
            min_size=1,
            max_size=5,
        )
    )
    def test_pass_hat_1_is_mean_success_rate(self, tasks):
        trials = []
        for i, (n, c) in enumerate(tasks):
            trials.extend(TaskTrial(f"task{i}", j, j < c) for j in range(n))
        expected = sum(c / n for n, c in tasks) / len(tasks)
        assert abs(pass_hat_k(trials, 1) - expected) < 1e-12


class TestReplayBundledTraces:
    def test_baseline_metrics(self, mini_airline):
        report = replay(WRITE_TRACE, mini_airline, "baseline")
        assert report.counts == {
            "expected": 10,
            "made_valid": 10,
            "made_invalid": 10,
            "blocked": 0,
        }
        assert report.precision == 0.5
        assert report.recall == 1.0

    def test_gated_metrics(self, mini_airline, pool):
        report = replay(WRITE_TRACE, mini_airline, "gated", pool)
        assert report.counts["made_valid"] == 9
        assert report.counts["made_invalid"] == 2
        assert report.counts["blocked"] == 9
        assert report.precision == 9 / 11
        assert report.recall == 9 / 10

    def test_gate_trades_recall_for_precision(self, mini_airline, pool):
        base = replay(WRITE_TRACE, mini_airline, "baseline")
        gated = replay(WRITE_TRACE, mini_airline, "gated", pool)
        assert gated.precision > base.precision
        assert gated.recall < base.recall

    def test_gated_consistency_declines_less(self, mini_airline, pool):
        base = replay(CONSISTENCY_TRACE, mini_airline, "baseline")
        gated = replay(CONSISTENCY_TRACE, mini_airline, "gated", pool)
        assert abs(relative_decline(base) - 1 / 3) < 1e-12
        assert relative_decline(gated) == 0.0
        assert relative_decline(gated) < relative_decline(base)

    def test_empty_trace(self, mini_airline, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text(json.dumps({"trace_format": 1}) + "\n")
        report = replay(path, mini_airline, "baseline")
        assert report.counts == {
            "expected": 0,
            "made_valid": 0,
            "made_invalid": 0,
            "blocked": 0,
        }
        assert report.precision is None and report.recall is None
        assert report.pass_hat == {}


class TestTraceParsing:
    def test_missing_header(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"task_id": "T1"}\n')
        with pytest.raises(MalformedTrace) as err:
            parse_trace(path)
        assert err.value.line == 1

    def test_bad_json_line_number(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text(json.dumps({"trace_format": 1}) + "\nnot json\n")
        with pytest.raises(MalformedTrace) as err:
            parse_trace(path)
        assert err.value.line == 2

    def test_label_required_on_write_calls(self, mini_airline, tmp_path):
        path = tmp_path / "t.jsonl"
        event = {
            "task_id": "T1",
            "trial_index": 0,
            "turn": 1,
            "tool_call": {"tool_name": "cancel_reservation", "arguments": {}},
            "state": {},
            "expected": True,
        }
        path.write_text(json.dumps({"trace_format": 1}) + "\n" + json.dumps(event) + "\n")
        with pytest.raises(MalformedTrace) as err:
            replay(path, mini_airline, "baseline")
        assert "missing its label" in err.value.cause

    def test_label_forbidden_on_read_calls(self, mini_airline, tmp_path):
        path = tmp_path / "t.jsonl"
        event = {
            "task_id": "T1",
            "trial_index": 0,
            "turn": 1,
            "tool_call": {"tool_name": "get_user_details", "arguments": {}},
            "state": {},
            "label": "valid",
        }
        path.write_text(json.dumps({"trace_format": 1}) + "\n" + json.dumps(event) + "\n")
        with pytest.raises(MalformedTrace):
            replay(path, mini_airline, "baseline")


class TestCompare:
    def _report(self, mode, pass_hat, k):
        return MetricsReport(
            mode=mode,
            counts={"expected": 0, "made_valid": 0, "made_invalid": 0, "blocked": 0},
            precision=None,
            recall=None,
            pass_hat=pass_hat,
            trials=(),
            k=k,
        )

    def test_decline_formula(self):
        report = self._report("baseline", {1: 0.5, 2: 0.4, 3: 0.35, 4: 0.3}, 4)
        assert abs(relative_decline(report) - 0.4) < 1e-12

    def test_identical_reports_have_zero_delta(self):
        a = self._report("gated", {1: 0.8, 2: 0.7}, 2)
        b = self._report("baseline", {1: 0.8, 2: 0.7}, 2)
        comparison = compare(a, b)
        assert comparison.decline_a == comparison.decline_b

    def test_mismatched_k_rejected(self):
        a = self._report("gated", {1: 0.8}, 1)
        b = self._report("baseline", {1: 0.8, 2: 0.7}, 2)
        with pytest.raises(ValueError):
            compare(a, b)

    def test_render_table_lists_all_metrics(self, mini_airline):
        report = replay(WRITE_TRACE, mini_airline, "baseline")
        table = render_table([report])
        for needle in ("precision", "recall", "pass^4", "baseline"):
            assert needle in table

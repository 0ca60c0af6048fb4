import os
from pathlib import Path

import pytest

from policygate.policy import load_package
from policygate.solver import SolverConfig, SolverPool

REPO_ROOT = Path(__file__).resolve().parents[1]
FIXTURES = REPO_ROOT / "fixtures"
BUNDLED_SOLVER = REPO_ROOT / "solver" / "z3pipe"


def solver_binary() -> str:
    env = os.environ.get("POLICY_GATE_SOLVER")
    if env:
        return env
    if not (BUNDLED_SOLVER.parent / "node_modules").exists():
        pytest.fail(
            "no SMT solver available: set POLICY_GATE_SOLVER or run "
            "`npm install` in solver/ to install the bundled one",
            pytrace=False,
        )
    return str(BUNDLED_SOLVER)


@pytest.fixture(scope="session")
def pool():
    with SolverPool(SolverConfig(binary=solver_binary(), pool_size=2)) as p:
        yield p


@pytest.fixture(scope="session")
def mini_airline():
    return load_package(FIXTURES / "mini_airline")


@pytest.fixture(scope="session")
def oracle_fixture_dirs():
    return sorted(p for p in (FIXTURES / "oracle").iterdir() if p.is_dir())


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    rows = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            if "test_acceptance" in report.nodeid and getattr(report, "when", "call") == "call":
                name = report.nodeid.split("::")[-1]
                rows.append((name, "PASS" if status == "passed" else "FAIL"))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, status in rows:
            terminalreporter.write_line(f"{status}  {name}")

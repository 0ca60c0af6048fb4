"""policygate: SMT solver-checked policy compliance gate for tool-calling
agents.

Compiles per-tool validation schemas and observable state into SMT-LIB 2.0
check scripts, decides Allow/Block per proposed tool call with an external
solver, explains blocks from unsat cores, and measures the gate's effect on
replayed traces.
"""

from .extraction import BindingSet, ExtractorConfig, ObservableState, ToolCall
from .gate import (
    Decision,
    GateConfig,
    GateEngine,
    Reason,
    SessionBudget,
    Verdict,
    build_check_script,
    explain,
)
from .policy import PolicyPackage, PolicyRegistry, ToolSchema, load_package, validate_package
from .replay import MetricsReport, compare, pass_hat_k, replay
from .solver import CheckOutcome, SolverConfig, SolverPool

__version__ = "0.1.0"

__all__ = [
    "BindingSet",
    "CheckOutcome",
    "Decision",
    "ExtractorConfig",
    "GateConfig",
    "GateEngine",
    "MetricsReport",
    "ObservableState",
    "PolicyPackage",
    "PolicyRegistry",
    "Reason",
    "SessionBudget",
    "SolverConfig",
    "SolverPool",
    "ToolCall",
    "ToolSchema",
    "Verdict",
    "build_check_script",
    "compare",
    "explain",
    "load_package",
    "pass_hat_k",
    "replay",
    "validate_package",
]

"""Task engine: request parsing, operator binding, plan synthesis/optimization, execution, LLM batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from .batching import BatchGroup, BatchOptimizer, Demo, LLMCall, UnbatchableCall, answer_calls, intent_of
from .executor import Executor, PlanFailure, RunResult
from .operators import (
    DEFAULT_WEIGHTS,
    AttributeIndex,
    Binding,
    ExecContext,
    OperatorSpec,
    Registry,
    Telemetry,
    bind,
    default_registry,
)
from .plan import Call, Node, PlanDAG, annotate, optimize_dag, pushdown, synthesize
from .request import Constraint, DeclarativeRequest, Predicate, TaskSpec, parse

__all__ = [
    "AttributeIndex", "BatchGroup", "BatchOptimizer", "Binding", "Call", "Constraint", "DEFAULT_WEIGHTS",
    "DeclarativeRequest", "Demo", "ExecContext", "Executor", "LLMCall", "Node", "OperatorSpec", "PlanDAG",
    "PlanFailure", "Predicate", "Registry", "RunResult", "TaskSpec", "Telemetry", "TaskRun", "UnbatchableCall",
    "annotate", "answer_calls", "bind", "default_registry", "intent_of", "optimize_dag", "parse", "pushdown",
    "run_task", "synthesize",
]


@dataclass
class TaskRun:
    spec: TaskSpec
    bindings: list[Binding]
    plan: PlanDAG
    result: RunResult | None

    def explain(self) -> dict[str, Any]:
        return {"spec": self.spec.to_dict(), "bindings": [b.to_dict() for b in self.bindings],
                "plan": self.plan.to_dict(), "plan_text": self.plan.explain()}


def run_task(request: DeclarativeRequest | Mapping, catalog, gateway=None, registry: Registry | None = None,
             telemetry: Telemetry | None = None, indexes: Mapping | None = None, max_workers: int = 4,
             execute: bool = True, seed: int = 0) -> TaskRun:
    """parse -> bind -> synthesize -> optimize -> execute."""
    spec = parse(request, catalog, gateway)
    registry = registry or default_registry()
    indexes = dict(indexes or {})
    bindings = bind(spec, registry, catalog, telemetry, indexes)
    plan = synthesize(bindings, spec, max_parallelism=max_workers, catalog=catalog)
    plan, _ = optimize_dag(plan, catalog=catalog)
    if "latency_ms" in spec.budgets:
        for n in plan.nodes.values():
            n.annotations["latency_budget_ms"] = spec.budgets["latency_ms"]
    result = None
    if execute:
        from ..gateway import Gateway, GatewayBudget

        if gateway is None:
            cost = spec.budgets.get("cost")
            gateway = Gateway(budget=GatewayBudget(max_tokens=int(cost) if cost is not None else None))
        ctx = ExecContext(catalog=catalog, gateway=gateway, indexes=indexes, batcher=BatchOptimizer(), seed=seed)
        result = Executor(ctx, telemetry, max_workers).run(plan, spec.budgets.get("latency_ms"))
    return TaskRun(spec, bindings, plan, result)

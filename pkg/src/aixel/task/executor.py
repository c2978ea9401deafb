"""Topological, parallel plan execution with retry, fallback, caching and telemetry."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Any

from ..errors import AixelError, BudgetExhausted
from .operators import ExecContext, Telemetry
from .plan import OUT, Call, Node, PlanDAG


class PlanFailure(AixelError):
    def __init__(self, node_id: str, cause: BaseException):
        super().__init__(f"node {node_id!r} failed after retry and fallback: {cause}")
        self.node_id = node_id
        self.cause = cause


@dataclass
class NodeStats:
    wall_ms: float = 0.0
    rows: int = 0
    attempts: int = 0
    cache_hit: bool = False
    fallback_used: bool = False
    reparam: dict | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunResult:
    outputs: dict[str, Any]
    status: str  # ok | budget-exceeded
    nodes: dict[str, NodeStats] = field(default_factory=dict)
    wall_ms: float = 0.0
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"status": self.status, "reason": self.reason, "wall_ms": self.wall_ms,
                "nodes": {k: v.to_dict() for k, v in self.nodes.items()}}


def _rows(v) -> int:
    if isinstance(v, list):
        return len(v)
    if isinstance(v, dict) and "scores" in v:
        return len(v["scores"])
    return 1


def _run_call(c: Call, inputs: list, ctx: ExecContext, use_fallback: bool):
    op = c.fallback if use_fallback and c.fallback is not None else c.op
    return op.fn(inputs, c.params, ctx)


def _rowwise(calls: list[Call], use_fallback: bool) -> bool:
    return all((c.fallback if use_fallback and c.fallback else c.op).row_fn is not None for c in calls)


def _fused_pass(calls: list[Call], rows: list[dict], use_fallback: bool) -> list[dict]:
    fns = [((c.fallback if use_fallback and c.fallback else c.op).row_fn, c.params) for c in calls]
    out = []
    for r in rows:
        for fn, p in fns:
            r = fn(r, p)
            if r is None:
                break
        else:
            out.append(r)
    return out


def run_node(node: Node, inputs: list, ctx: ExecContext, use_fallback: bool = False) -> dict[str, Any]:
    """Channel -> value for one node; fused nodes make a single pass over their input rows."""
    if node.mode == "sibling":
        if all(m.mode != "sibling" and _rowwise(m.calls, use_fallback) for m in node.members):
            outs: dict[str, list] = {m.node_id: [] for m in node.members}
            fns = {m.node_id: [((c.fallback if use_fallback and c.fallback else c.op).row_fn, c.params) for c in m.calls]
                   for m in node.members}
            for r in inputs[0]:
                for mid, chain in fns.items():
                    v = r
                    for fn, p in chain:
                        v = fn(v, p)
                        if v is None:
                            break
                    if v is not None:
                        outs[mid].append(v)
            return outs
        return {m.node_id: run_node(m, inputs, ctx, use_fallback)[OUT] for m in node.members}
    if node.mode == "chain" and _rowwise(node.calls, use_fallback):
        return {OUT: _fused_pass(node.calls, inputs[0], use_fallback)}
    val = inputs
    for c in node.calls:
        val = [_run_call(c, val, ctx, use_fallback)]
    return {OUT: val[0]}


def _key(node: Node, inputs: list) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(node.to_dict()["calls" if node.mode != "sibling" else "members"], sort_keys=True, default=str).encode())
    h.update(json.dumps(inputs, sort_keys=True, default=str).encode())
    return h.hexdigest()


class Executor:
    def __init__(self, ctx: ExecContext | None = None, telemetry: Telemetry | None = None, max_workers: int = 4,
                 cache: bool = True):
        self.ctx = ctx or ExecContext()
        self.telemetry = telemetry
        self.max_workers = max_workers
        self.cache_enabled = cache
        self._cache: dict[str, dict] = {}
        self._lock = threading.Lock()

    def _attempt(self, node: Node, inputs: list, st: NodeStats) -> dict[str, Any]:
        last: BaseException | None = None
        for use_fallback in (False, False, True):  # one retry, then the fallback variant
            if use_fallback and not any(c.fallback for c in node.all_calls()):
                break
            st.attempts += 1
            try:
                out = run_node(node, inputs, self.ctx, use_fallback)
                st.fallback_used = use_fallback
                return out
            except BudgetExhausted:
                raise
            except Exception as e:  # noqa: BLE001 - any operator fault triggers retry/fallback
                last = e
        raise PlanFailure(node.node_id, last)

    def _reparam(self, node: Node, wall_ms: float, st: NodeStats) -> None:
        budget = node.annotations.get("latency_budget_ms")
        if not budget or wall_ms <= 2 * budget:
            return
        for c in node.all_calls():
            sizes = sorted(c.op.batch_sizes)
            if len(sizes) < 2:
                continue
            cur = c.params.get("batch_size") or sizes[-1]
            lower = [s for s in sizes if s < cur]
            if lower:
                c.params["batch_size"] = lower[-1]
                st.reparam = {"batch_size": [cur, lower[-1]]}

    def _exec(self, node: Node, inputs: list) -> tuple[dict[str, Any], NodeStats]:
        st = NodeStats()
        t0 = time.perf_counter()
        key = _key(node, inputs) if self.cache_enabled and node.annotations.get("cache") else None
        hit = None
        if key is not None:
            with self._lock:
                hit = self._cache.get(key)
        if hit is not None:
            out, st.cache_hit = hit, True
        else:
            try:
                out = self._attempt(node, inputs, st)
            except PlanFailure:
                st.wall_ms = (time.perf_counter() - t0) * 1e3
                self._record(node, st, ok=False)
                raise
            if key is not None:
                with self._lock:
                    self._cache[key] = out
        st.wall_ms = (time.perf_counter() - t0) * 1e3
        st.rows = sum(_rows(v) for v in out.values())
        self._reparam(node, st.wall_ms, st)
        self._record(node, st, ok=True)
        return out, st

    def _record(self, node: Node, st: NodeStats, ok: bool) -> None:
        if self.telemetry is None:
            return
        for c in node.all_calls():
            op = c.fallback if st.fallback_used and c.fallback else c.op
            self.telemetry.record(op.op_id, ok, st.wall_ms, st.rows, st.cache_hit, node=node.node_id,
                                  fallback=st.fallback_used, reparam=st.reparam)
            if st.fallback_used:
                self.telemetry.record(c.op.op_id, False, st.wall_ms, 0, False, node=node.node_id, switched_to=op.op_id)

    def run(self, plan: PlanDAG, latency_budget_ms: float | None = None) -> RunResult:
        plan.validate()
        order = plan.topo_order()
        deps = {k: plan.deps(k) for k in order}
        values: dict[tuple[str, str], Any] = {}
        stats: dict[str, NodeStats] = {}
        done: set[str] = set()
        status, reason = "ok", None
        t0 = time.perf_counter()
        workers = max(1, min(self.max_workers, plan.max_parallelism))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            running: dict = {}
            pending = list(order)
            while pending or running:
                over = latency_budget_ms is not None and (time.perf_counter() - t0) * 1e3 > latency_budget_ms
                if over and status == "ok":
                    status, reason = "budget-exceeded", f"latency budget {latency_budget_ms:g} ms exceeded"
                if status == "ok":
                    for k in [k for k in pending if all(d in done for d in deps[k])]:
                        if len(running) >= workers:
                            break
                        n = plan.nodes[k]
                        ins = [values[r] for r in n.inputs]
                        running[pool.submit(self._exec, n, ins)] = k
                        pending.remove(k)
                if not running:
                    break
                finished, _ = wait(list(running), return_when=FIRST_COMPLETED)
                for fut in finished:
                    k = running.pop(fut)
                    try:
                        out, st = fut.result()
                    except BudgetExhausted as e:
                        status, reason = "budget-exceeded", str(e)
                        continue
                    except PlanFailure:
                        for f in running:
                            f.cancel()
                        raise
                    stats[k] = st
                    done.add(k)
                    for ch, v in out.items():
                        values[(k, ch)] = v
        outputs = {name: values[ref] for name, ref in plan.outputs.items() if ref in values}
        if status == "ok" and len(outputs) < len(plan.outputs):
            status = "budget-exceeded"
        return RunResult(outputs, status, stats, (time.perf_counter() - t0) * 1e3, reason)

"""Plan DAGs: synthesis with pushdown and annotations, and the merge optimizer."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from ..errors import PlanningError
from ..gateway import estimate_tokens
from .operators import Binding, OperatorSpec, constraints_of

OUT = "out"
Ref = tuple[str, str]  # (node id, channel)


@dataclass
class Call:
    op: OperatorSpec
    params: dict
    fallback: OperatorSpec | None = None

    def to_dict(self) -> dict:
        return {"op": self.op.op_id, "fallback": self.fallback.op_id if self.fallback else None,
                "params": json.loads(json.dumps(self.params, default=str))}


@dataclass
class Node:
    """``single`` runs one call; ``chain`` composes its calls; ``sibling`` runs members on shared inputs."""

    node_id: str
    calls: list[Call] = field(default_factory=list)
    inputs: list[Ref] = field(default_factory=list)
    mode: str = "single"
    members: list["Node"] = field(default_factory=list)
    after: list[str] = field(default_factory=list)  # control-only dependencies
    annotations: dict = field(default_factory=dict)

    @property
    def channels(self) -> list[str]:
        return [m.node_id for m in self.members] if self.mode == "sibling" else [OUT]

    @property
    def family(self) -> str:
        return self.members[0].family if self.mode == "sibling" else self.calls[0].op.family

    @property
    def variant(self) -> str:
        if self.mode == "sibling":
            return "|".join(m.variant for m in self.members)
        return "+".join(c.op.op_id for c in self.calls)

    @property
    def template_id(self) -> str | None:
        return None if self.mode == "sibling" else self.calls[-1].params.get("template_id")

    @property
    def input_types(self) -> tuple[str, ...]:
        return self.members[0].input_types if self.mode == "sibling" else self.calls[0].op.inputs

    def output_type(self, channel: str) -> str:
        if self.mode == "sibling":
            return next(m for m in self.members if m.node_id == channel).output_type(OUT)
        if channel != OUT:
            raise PlanningError(f"node {self.node_id} has no channel {channel!r}")
        return self.calls[-1].op.output

    def all_calls(self) -> list[Call]:
        return [c for m in self.members for c in m.all_calls()] if self.mode == "sibling" else list(self.calls)

    def to_dict(self) -> dict:
        d = {"id": self.node_id, "mode": self.mode, "variant": self.variant, "inputs": [list(r) for r in self.inputs],
             "channels": self.channels, "annotations": self.annotations}
        if self.after:
            d["after"] = list(self.after)
        if self.mode == "sibling":
            d["members"] = [m.to_dict() for m in self.members]
        else:
            d["calls"] = [c.to_dict() for c in self.calls]
        return d


@dataclass
class PlanDAG:
    nodes: dict[str, Node] = field(default_factory=dict)
    outputs: dict[str, Ref] = field(default_factory=dict)
    max_parallelism: int = 8
    boundaries: list[str] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    # -- structure --
    def add(self, node: Node) -> Node:
        if node.node_id in self.nodes:
            raise PlanningError(f"duplicate node id {node.node_id!r}")
        self.nodes[node.node_id] = node
        return node

    def deps(self, nid: str) -> list[str]:
        n = self.nodes[nid]
        return list(dict.fromkeys([r[0] for r in n.inputs] + n.after))

    def consumers(self, nid: str) -> list[str]:
        return [m.node_id for m in self.nodes.values() if any(r[0] == nid for r in m.inputs)]

    def topo_order(self) -> list[str]:
        order_ix = {k: i for i, k in enumerate(self.nodes)}
        indeg = {k: 0 for k in self.nodes}
        for k in self.nodes:
            for d in self.deps(k):
                if d not in self.nodes:
                    raise PlanningError(f"node {k!r} depends on unknown node {d!r}")
                indeg[k] += 1
        ready = sorted((k for k, v in indeg.items() if v == 0), key=order_ix.get)
        out = []
        while ready:
            k = ready.pop(0)
            out.append(k)
            for m in self.nodes:
                if k in self.deps(m):
                    indeg[m] -= 1
                    if indeg[m] == 0:
                        ready.append(m)
            ready.sort(key=order_ix.get)
        if len(out) != len(self.nodes):
            stuck = sorted(k for k in self.nodes if k not in out)
            raise PlanningError(f"dependency cycle among nodes {stuck}")
        return out

    def levels(self) -> dict[str, int]:
        lv: dict[str, int] = {}
        for k in self.topo_order():
            lv[k] = 1 + max((lv[d] for d in self.deps(k)), default=-1)
        return lv

    def validate(self) -> None:
        """Acyclic, edge types match the consumer's signature, fallbacks are signature-equal."""
        self.topo_order()
        for n in self.nodes.values():
            got = tuple(self.nodes[r[0]].output_type(r[1]) for r in n.inputs)
            if got != n.input_types:
                raise PlanningError(f"node {n.node_id}: inputs {got} do not match signature {n.input_types}")
            for c in n.all_calls():
                if c.fallback is not None and c.fallback.signature != c.op.signature:
                    raise PlanningError(f"node {n.node_id}: fallback {c.fallback.op_id} signature differs")
            if n.mode == "chain":
                for a, b in zip(n.calls, n.calls[1:]):
                    if b.op.inputs != (a.op.output,):
                        raise PlanningError(f"node {n.node_id}: chain types do not line up")
        for name, (nid, ch) in self.outputs.items():
            if nid not in self.nodes or ch not in self.nodes[nid].channels:
                raise PlanningError(f"output {name!r} points at missing channel {nid}.{ch}")

    def rewire(self, old: Ref, new: Ref) -> None:
        for n in self.nodes.values():
            n.inputs = [new if r == old else r for r in n.inputs]
        for k, r in self.outputs.items():
            if r == old:
                self.outputs[k] = new

    def copy(self) -> "PlanDAG":
        memo = {}
        for n in self.nodes.values():  # operator specs hold callables; share them
            for c in n.all_calls():
                memo[id(c.op)] = c.op
                if c.fallback is not None:
                    memo[id(c.fallback)] = c.fallback
        return copy.deepcopy(self, memo)

    def to_dict(self) -> dict:
        return {"nodes": [self.nodes[k].to_dict() for k in self.topo_order()],
                "outputs": {k: list(v) for k, v in self.outputs.items()},
                "max_parallelism": self.max_parallelism, "boundaries": self.boundaries, "rewrites": self.log}

    def explain(self) -> str:
        lines = []
        for k in self.topo_order():
            n = self.nodes[k]
            ins = ", ".join(f"{a}.{c}" if c != OUT else a for a, c in n.inputs) or "-"
            tags = [t for t in ("pushdown", "materialize", "parallel", "cache") if n.annotations.get(t)]
            fb = [c.fallback.op_id for c in n.all_calls() if c.fallback]
            lines.append(f"{k}: {n.variant} <- {ins}" + (f" [{', '.join(tags)}]" if tags else "")
                         + (f" fallback={','.join(fb)}" if fb else ""))
        return "\n".join(lines)


def sinks(plan: PlanDAG) -> dict[str, Ref]:
    used = {r for n in plan.nodes.values() for r in n.inputs}
    return {f"{k}.{ch}" if ch != OUT else k: (k, ch) for k, n in plan.nodes.items() for ch in n.channels if (k, ch) not in used}


# -- static schema and size estimates -------------------------------------------------

def fields_of(plan: PlanDAG, ref: Ref, catalog=None) -> set[str] | None:
    """Statically known row fields at ``ref``, or None when unknown."""
    n = plan.nodes[ref[0]]
    if n.mode == "sibling":
        sub = PlanDAG({m.node_id: m for m in n.members} | {k: v for k, v in plan.nodes.items() if k != n.node_id})
        return fields_of(sub, (ref[1], OUT), catalog)
    cur: set[str] | None = None
    for i, c in enumerate(n.calls):
        ins = [fields_of(plan, r, catalog) for r in n.inputs] if i == 0 else [cur]
        cur = _call_fields(c, ins, catalog)
    return cur


def _call_fields(c: Call, ins: list, catalog) -> set[str] | None:
    step = next(iter(c.op.steps))
    p = c.params
    if c.op.output != "table":
        return None
    if step == "source":
        if "rows" in p:
            return {k for r in p["rows"] for k in r}
        if catalog is not None and p.get("dataset"):
            return {"_id"} | {f.name for f in catalog.descriptor(p["dataset"]).schema}
        return None
    if step == "project":
        return set(p["fields"]) if ins[0] is None else set(p["fields"]) & ins[0]
    if step == "map":
        return None if ins[0] is None else ins[0] | {p.get("as", p["field"])}
    if step == "join":
        if ins[0] is None or ins[1] is None:
            return None
        return ins[0] | {f"r.{k}" for k in ins[1] if k != p.get("key", "_id")}
    if step == "retrieve":
        return None if ins[0] is None else ins[0] | {"_score"}
    return ins[0] if ins else None


def estimate_rows(plan: PlanDAG, catalog=None) -> dict[Ref, float]:
    est: dict[Ref, float] = {}

    def call_rows(c: Call, ins: list[float]) -> float:
        step = next(iter(c.op.steps))
        if step == "source":
            if "rows" in c.params:
                return float(len(c.params["rows"]))
            if catalog is not None and c.params.get("dataset"):
                return float(catalog.dataset(c.params["dataset"]).live_count)
            return 1000.0
        if step == "limit":
            return min(float(c.params["n"]), ins[0])
        if step == "join":
            return max(ins)
        if not ins:
            return 1.0
        return ins[0] * c.op.selectivity

    def node_rows(n: Node, ins: list[float]) -> dict[str, float]:
        if n.mode == "sibling":
            return {m.node_id: node_rows(m, ins)[OUT] for m in n.members}
        cur = ins
        for c in n.calls:
            cur = [call_rows(c, cur)]
        return {OUT: cur[0]}

    for k in plan.topo_order():
        n = plan.nodes[k]
        for ch, v in node_rows(n, [est[r] for r in n.inputs]).items():
            est[(k, ch)] = v
    return est


# -- synthesis -------------------------------------------------------------------------

def _step(c: Call) -> str:
    return next(iter(sorted(c.op.steps)))


def _filter_fields(c: Call) -> set[str]:
    return {x.field for x in constraints_of(c.params)}


def pushdown(plan: PlanDAG, catalog=None) -> int:
    """Move filters below projections, maps, sorts and (left side of) joins where type-safe."""
    moved = 0
    changed = True
    while changed:
        changed = False
        for fid in plan.topo_order():
            f = plan.nodes[fid]
            if f.mode != "single" or _step(f.calls[0]) != "filter" or len(f.inputs) != 1 or f.after:
                continue
            xid, ch = f.inputs[0]
            x = plan.nodes[xid]
            if x.mode != "single" or ch != OUT or plan.consumers(xid) != [fid] or x.after:
                continue
            if any(r == (xid, OUT) for r in plan.outputs.values()):
                continue
            step, need = _step(x.calls[0]), _filter_fields(f.calls[0])
            xp = x.calls[0].params
            if step == "project":
                ok = need <= set(xp["fields"])
            elif step == "map":
                ok = xp.get("as", xp["field"]) not in need
            elif step == "sort":
                ok = True
            elif step == "join":
                left = fields_of(plan, x.inputs[0], catalog)
                ok = left is not None and need <= left and not any(k.startswith("r.") for k in need)
            else:
                ok = False
            if not ok:
                continue
            plan.rewire((fid, OUT), ("__tmp__", OUT))
            f.inputs = [x.inputs[0]]
            x.inputs = [(fid, OUT)] + x.inputs[1:]
            plan.rewire(("__tmp__", OUT), (xid, OUT))
            f.annotations["pushdown"] = True
            plan.log.append({"rule": "pushdown", "node": fid, "below": xid, "via": step})
            # keep dict order topological so ties resolve predictably
            plan.nodes = {k: plan.nodes[k] for k in plan.topo_order()}
            moved += 1
            changed = True
            break
    return moved


def annotate(plan: PlanDAG, catalog=None) -> PlanDAG:
    lv = plan.levels()
    width: dict[int, int] = {}
    for v in lv.values():
        width[v] = width.get(v, 0) + 1
    degree = max(1, min(plan.max_parallelism, max(width.values(), default=1)))
    deterministic: dict[str, bool] = {}
    plan.boundaries = []
    est = estimate_rows(plan, catalog)
    for k in plan.topo_order():
        n = plan.nodes[k]
        calls = n.all_calls()
        deterministic[k] = all(c.op.deterministic for c in calls) and all(deterministic[d] for d in plan.deps(k))
        fan_out = len(plan.consumers(k))
        a = n.annotations
        a["materialize"] = fan_out >= 2
        if fan_out >= 2:
            plan.boundaries.append(k)
        a["parallelism"] = degree
        a["parallel"] = degree > 1 and width[lv[k]] > 1
        a["cache"] = all(c.op.cacheable for c in calls) and deterministic[k]
        a["retry"] = {"retries": 1, "fallback": [c.fallback.op_id if c.fallback else None for c in calls]}
        a["est_rows"] = {ch: est[(k, ch)] for ch in n.channels}
    return plan


def synthesize(bindings: Sequence[Binding], spec=None, deps: Mapping[str, Sequence[str]] | None = None,
               after: Iterable[tuple[str, str]] = (), max_parallelism: int = 8, catalog=None) -> PlanDAG:
    """Compose bound steps into a DAG.

    Without ``deps`` the steps form a pipeline in declaration order. ``after``
    adds control edges ``(a, b)`` meaning b runs after a.
    """
    plan = PlanDAG(max_parallelism=max_parallelism)
    prev = None
    for b in bindings:
        nid = b.step
        if deps is not None and nid in deps:
            ins = [(d, OUT) for d in deps[nid]]
        elif b.op.inputs and prev is not None:
            ins = [(prev, OUT)]
        else:
            ins = []
        if len(ins) != len(b.op.inputs):
            raise PlanningError(f"step {nid!r} needs {len(b.op.inputs)} inputs, got {len(ins)}")
        plan.add(Node(nid, [Call(b.op, dict(b.params), b.fallback)], ins))
        prev = nid
    for a, b in after:
        if a not in plan.nodes or b not in plan.nodes:
            raise PlanningError(f"dependency ({a}, {b}) names an unknown step")
        plan.nodes[b].after.append(a)
    plan.topo_order()
    plan.outputs = sinks(plan)
    pushdown(plan, catalog)
    plan.validate()
    return annotate(plan, catalog)


# -- optimizer -------------------------------------------------------------------------

ROW_LIMIT = 10_000
CONTEXT_TOKENS = 4096
MAX_CHAIN = 3
ROWWISE_TOKENS = 8


def _llm_tokens(n: Node, rows: float) -> float:
    q = n.calls[-1].params.get("question", "")
    return rows * (estimate_tokens(q) + ROWWISE_TOKENS)


def _chain_merge(plan: PlanDAG, log: list) -> bool:
    observed = set(plan.outputs.values())
    for aid in plan.topo_order():
        a = plan.nodes[aid]
        cons = plan.consumers(aid)
        if a.mode not in ("single", "chain") or len(cons) != 1:
            continue
        b = plan.nodes[cons[0]]
        if b.mode not in ("single", "chain") or b.inputs != [(aid, OUT)]:
            continue
        calls = a.calls + b.calls
        guards = {
            "fusable": {"value": all(c.op.fusable for c in calls), "pass": all(c.op.fusable for c in calls)},
            "length": {"value": len(calls), "limit": MAX_CHAIN, "pass": len(calls) <= MAX_CHAIN},
            "single_consumer": {"value": len(cons), "pass": True},
            "intermediate_unobserved": {"value": (aid, OUT) not in observed, "pass": (aid, OUT) not in observed},
            "no_control_edges": {"value": not (a.after or b.after or any(aid in n.after for n in plan.nodes.values())),
                                 "pass": not (a.after or b.after or any(aid in n.after for n in plan.nodes.values()))},
        }
        if not all(g["pass"] for g in guards.values()):
            if guards["fusable"]["pass"]:
                log.append({"rule": "chain", "nodes": [aid, b.node_id], "applied": False, "guards": guards})
            continue
        nid = f"{aid}+{b.node_id}"
        merged = Node(nid, calls, list(a.inputs), "chain", annotations={})
        order = list(plan.nodes)
        del plan.nodes[aid]
        del plan.nodes[b.node_id]
        plan.nodes[nid] = merged
        plan.rewire((b.node_id, OUT), (nid, OUT))
        plan.nodes = {k: plan.nodes[k] for k in sorted(plan.nodes, key=lambda k: order.index(k) if k in order else order.index(aid))}
        log.append({"rule": "chain", "nodes": [aid, b.node_id], "into": nid, "applied": True, "guards": guards})
        return True
    return False


def _sibling_guards(seed: Node, other: Node, group: list[Node], parent_rows: float, row_limit: int, context: int) -> dict:
    k = len(group) + 1
    g = {
        "same_family": {"value": [seed.family, other.family], "pass": seed.family == other.family},
        "same_variant": {"value": [seed.variant, other.variant], "pass": seed.variant == other.variant},
        "combined_rows": {"value": k * parent_rows, "limit": 2 * row_limit, "pass": k * parent_rows <= 2 * row_limit},
    }
    if seed.family == "LLM" or other.family == "LLM":
        g["same_template"] = {"value": [seed.template_id, other.template_id], "pass": seed.template_id == other.template_id}
        toks = sum(_llm_tokens(n, parent_rows) for n in group + [other])
        g["combined_tokens"] = {"value": toks, "limit": context, "pass": toks <= context}
    return g


def _sibling_merge(plan: PlanDAG, log: list, row_limit: int, context: int, catalog) -> bool:
    est = estimate_rows(plan, catalog)
    for pid in plan.topo_order():
        for ch in plan.nodes[pid].channels:
            ref = (pid, ch)
            kids = [plan.nodes[c] for c in plan.consumers(pid)]
            kids = [k for k in kids if k.mode in ("single", "chain") and k.inputs == [ref] and not k.after
                    and not any(k.node_id in n.after for n in plan.nodes.values())]
            if len(kids) < 2:
                continue
            remaining = list(kids)
            while len(remaining) >= 2:
                seed = remaining.pop(0)
                group, passed = [seed], []
                for other in list(remaining):
                    guards = _sibling_guards(seed, other, group, est[ref], row_limit, context)
                    ok = all(g["pass"] for g in guards.values())
                    if ok:
                        passed.append(guards)
                        group.append(other)
                        remaining.remove(other)
                    else:
                        log.append({"rule": "sibling", "nodes": [seed.node_id, other.node_id], "applied": False,
                                    "guards": guards})
                if len(group) < 2:
                    continue
                nid = "|".join(n.node_id for n in group)
                merged = Node(nid, [], [ref], "sibling", [Node(n.node_id, n.calls, [ref], n.mode) for n in group])
                order = list(plan.nodes)
                first = min(order.index(n.node_id) for n in group)
                for n in group:
                    del plan.nodes[n.node_id]
                plan.nodes[nid] = merged
                for n in group:
                    plan.rewire((n.node_id, OUT), (nid, n.node_id))
                    for m in plan.nodes.values():
                        m.after = [nid if a == n.node_id else a for a in m.after]
                plan.nodes = {k: plan.nodes[k] for k in sorted(plan.nodes, key=lambda k: order.index(k) if k in order else first)}
                log.append({"rule": "sibling", "nodes": [n.node_id for n in group], "into": nid, "applied": True,
                            "guards": passed[-1], "member_guards": passed})
                return True
    return False


def optimize_dag(plan: PlanDAG, row_limit: int = ROW_LIMIT, context_tokens: int = CONTEXT_TOKENS,
                 catalog=None) -> tuple[PlanDAG, list[dict]]:
    """Chain merges then sibling merges, each guarded; returns the input plan unchanged if anything breaks."""
    out = plan.copy()
    log: list[dict] = []
    try:
        while _chain_merge(out, log):
            pass
        while _sibling_merge(out, log, row_limit, context_tokens, catalog):
            pass
        out.validate()
        annotate(out, catalog)
    except PlanningError as e:
        return plan, [{"rule": "rollback", "applied": False, "reason": str(e)}]
    out.log = list(plan.log) + log
    return out, log

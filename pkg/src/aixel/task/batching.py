"""LLM batch optimizer: intent grouping, shared demonstrations, segment dedup and scheduling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..catalog import Record
from ..errors import UserError
from ..features import hash_encode
from ..gateway import estimate_tokens

AFFINITY = 0.8
DEMO_DIVERSITY = 0.95
INTENT_DIM = 64


class UnbatchableCall(UserError):
    pass


def intent_of(text: str, dim: int = INTENT_DIM) -> np.ndarray:
    """Intent embedding of a query via the attribute encoder."""
    return hash_encode(Record("q", {"text": text}), dim)


@dataclass
class LLMCall:
    call_id: str
    template_id: str
    query: str
    intent: np.ndarray | None = None
    segments: tuple[str, ...] = ()  # shared context blocks, e.g. instructions or retrieved passages

    def __post_init__(self):
        if self.intent is None:
            self.intent = intent_of(self.query)
        self.intent = np.asarray(self.intent, float)


@dataclass(frozen=True)
class Demo:
    text: str
    intent: np.ndarray


def _norm(s: str) -> str:
    return " ".join(s.split())


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


@dataclass
class BatchGroup:
    template_id: str
    members: list[LLMCall] = field(default_factory=list)
    demos: list[Demo] = field(default_factory=list)

    @property
    def centroid(self) -> np.ndarray:
        return np.mean([m.intent for m in self.members], axis=0)

    @property
    def queries(self) -> list[str]:
        """Distinct normalized queries in first-seen order."""
        return list(dict.fromkeys(_norm(m.query) for m in self.members))

    @property
    def segments(self) -> list[str]:
        return list(dict.fromkeys(_norm(s) for m in self.members for s in m.segments))

    @property
    def batch_size(self) -> int:
        return len(self.queries)

    def prompt(self, queries: Sequence[str] | None = None, segments: Sequence[str] | None = None,
               demos: Sequence[Demo] | None = None) -> str:
        qs = self.queries if queries is None else queries
        segs = self.segments if segments is None else segments
        lines = [f"ANSWER[{self.template_id}]:"]
        lines += [f"CONTEXT: {s}" for s in segs]
        lines += [f"DEMO: {d.text}" for d in (self.demos if demos is None else demos)]
        lines += [f"[{i}] {q}" for i, q in enumerate(qs)]
        return "\n".join(lines)

    def tokens(self) -> int:
        return estimate_tokens(self.prompt())

    def tokens_with(self, call: LLMCall) -> int:
        qs = list(dict.fromkeys(self.queries + [_norm(call.query)]))
        segs = list(dict.fromkeys(self.segments + [_norm(s) for s in call.segments]))
        return estimate_tokens(self.prompt(qs, segs))


def choose_demos(group: BatchGroup, pool: Sequence[Demo], k: int, limit: int,
                 floor: float = DEMO_DIVERSITY) -> list[Demo]:
    """Greedy max-coverage of member intents with a pairwise-similarity ceiling between demos."""
    chosen: list[Demo] = []
    intents = [m.intent for m in group.members]
    best = np.zeros(len(intents))
    for _ in range(k):
        pick, pick_gain = None, 0.0
        for d in pool:
            if any(d is c for c in chosen) or any(_cos(d.intent, c.intent) > floor for c in chosen):
                continue
            sims = np.array([max(0.0, _cos(d.intent, x)) for x in intents])
            gain = float(np.maximum(best, sims).sum() - best.sum())
            if gain > pick_gain + 1e-12:
                pick, pick_gain = d, gain
        if pick is None:
            break
        if estimate_tokens(group.prompt(demos=chosen + [pick])) > limit:
            break
        chosen.append(pick)
        best = np.maximum(best, [max(0.0, _cos(pick.intent, x)) for x in intents])
    return chosen


class BatchOptimizer:
    """Groups calls into batches and remembers per-template size caps learned from realized latency."""

    def __init__(self, context_limit: int = 2048, affinity: float = AFFINITY, n_demos: int = 2,
                 latency_budget_ms: float | None = None):
        self.context_limit = context_limit
        self.affinity = affinity
        self.n_demos = n_demos
        self.latency_budget_ms = latency_budget_ms
        self.max_size: dict[str, int] = {}

    def group(self, calls: Sequence[LLMCall], demo_pool: Sequence[Demo] = (), max_size: int | None = None) -> list[BatchGroup]:
        groups: list[BatchGroup] = []
        for call in calls:
            solo = BatchGroup(call.template_id, [call])
            if solo.tokens() > self.context_limit:
                raise UnbatchableCall(f"call {call.call_id} needs {solo.tokens()} tokens alone; context limit is {self.context_limit}")
            caps = [x for x in (max_size, self.max_size.get(call.template_id)) if x]
            cap = min(caps) if caps else None
            best, best_sim = None, -1.0
            for g in groups:
                if g.template_id != call.template_id:
                    continue
                dup = _norm(call.query) in g.queries
                if cap is not None and not dup and g.batch_size >= cap:
                    continue
                sim = 1.0 if dup else _cos(call.intent, g.centroid)
                if sim < self.affinity or g.tokens_with(call) > self.context_limit:
                    continue
                if sim > best_sim:
                    best, best_sim = g, sim
            if best is None:
                groups.append(solo)
            else:
                best.members.append(call)
        if demo_pool and self.n_demos:
            for g in groups:
                g.demos = choose_demos(g, demo_pool, self.n_demos, self.context_limit)
        return self.schedule(groups)

    @staticmethod
    def schedule(groups: list[BatchGroup]) -> list[BatchGroup]:
        """Order so groups sharing a prompt prefix (template, segments, demos) run back to back."""
        return sorted(groups, key=lambda g: (g.template_id, tuple(g.segments), tuple(d.text for d in g.demos)))

    def observe(self, group: BatchGroup, latency_ms: float) -> None:
        """Online rebalancing: an over-budget group halves the template's size cap for later waves."""
        if self.latency_budget_ms is not None and latency_ms > self.latency_budget_ms and group.batch_size > 1:
            self.max_size[group.template_id] = max(1, group.batch_size // 2)


def split(group: BatchGroup) -> list[BatchGroup]:
    qs = group.queries
    if len(qs) < 2:
        return [group]
    first = set(qs[: len(qs) // 2])
    a = BatchGroup(group.template_id, [m for m in group.members if _norm(m.query) in first], list(group.demos))
    b = BatchGroup(group.template_id, [m for m in group.members if _norm(m.query) not in first], list(group.demos))
    return [a, b]


ANSWERS_SCHEMA = {"answers": "list"}


def run_group(group: BatchGroup, gateway) -> dict[str, str]:
    """One gateway call for the group; returns answers keyed by call id (duplicates fanned out)."""
    qs = group.queries
    out = gateway.complete_prompt(group.prompt(), ANSWERS_SCHEMA)
    answers = out["answers"]
    if len(answers) != len(qs):
        raise UserError(f"batch answer count {len(answers)} does not match {len(qs)} queries")
    by_q = dict(zip(qs, answers))
    return {m.call_id: by_q[_norm(m.query)] for m in group.members}


def answer_calls(calls: Sequence[LLMCall], gateway, optimizer: BatchOptimizer | None = None,
                 max_size: int | None = None, demo_pool: Sequence[Demo] = ()) -> list[str]:
    """Answers in call order; ``optimizer=None`` issues one gateway call per query (unbatched)."""
    if optimizer is None:
        groups = [BatchGroup(c.template_id, [c]) for c in calls]
    else:
        groups = optimizer.group(calls, demo_pool, max_size)
    res: dict[str, str] = {}
    for g in groups:
        t0 = time.perf_counter()
        res.update(run_group(g, gateway))
        if optimizer is not None:
            optimizer.observe(g, (time.perf_counter() - t0) * 1e3)
    return [res[c.call_id] for c in calls]

"""Constraint-aware search over fusion graphs.

The traversal works on a query-specific subgraph: an edge is followed only when
the neighbour's attribute copy lies in the query range and its label copy
overlaps the query labels. Nodes that violate the constraints may still be used
as routing hops, at most ``relaxation_budget`` in a row, but are never returned.
The expansion queue is ordered by the provisional fused score rather than raw
similarity.
"""

from __future__ import annotations

import heapq
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import UserError
from .fusion_index import FusionIndex, PartitionedIndex

log = logging.getLogger(__name__)

AUTO_RELAXATION = 2


@dataclass(frozen=True)
class Filter:
    field: str
    op: str
    value: Any


@dataclass(frozen=True)
class ConstraintProfile:
    range: tuple[float, float] | None = None
    labels: frozenset[str] = frozenset()
    label_mode: str = "any"
    relaxation_budget: int = 0
    unsatisfiable: bool = False
    reason: str = ""

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(self.labels))
        object.__setattr__(self, "label_mode", self.label_mode.lower())
        if self.label_mode not in ("any", "all"):
            raise UserError(f"label mode must be ANY or ALL, got {self.label_mode!r}")
        if self.range is not None:
            lo, hi = float(self.range[0]), float(self.range[1])
            object.__setattr__(self, "range", (lo, hi))
            if lo > hi and not self.unsatisfiable:
                object.__setattr__(self, "unsatisfiable", True)
                object.__setattr__(self, "reason", f"empty range [{lo}, {hi}]")
        if self.relaxation_budget < 0:
            raise UserError("relaxation_budget must be non-negative")

    @property
    def unconstrained(self) -> bool:
        return self.range is None and not self.labels

    def admits(self, attr: float, labels: frozenset[str] | set[str]) -> bool:
        if self.unsatisfiable:
            return False
        if self.range is not None and not (self.range[0] <= attr <= self.range[1]):
            return False
        if self.labels:
            if self.label_mode == "any":
                return bool(self.labels & set(labels))
            return self.labels <= set(labels)
        return True


@dataclass(frozen=True)
class RankWeights:
    w_sim: float = 0.7
    w_range: float = 0.15
    w_label: float = 0.15

    def __post_init__(self):
        ws = (self.w_sim, self.w_range, self.w_label)
        if any(w < 0 for w in ws) or abs(sum(ws) - 1.0) > 1e-9:
            raise UserError(f"rank weights must be non-negative and sum to 1, got {ws}")

    @classmethod
    def parse(cls, text: str) -> "RankWeights":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise UserError("weights need three comma-separated values")
        return cls(*parts)


@dataclass
class Candidate:
    node_id: int
    sim: float
    range_fit: float
    label_cov: float
    score: float
    evidence: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "node_id": self.node_id,
            "score": self.score,
            "sim": self.sim,
            "range_fit": self.range_fit,
            "label_cov": self.label_cov,
        }
        if self.evidence is not None:
            d["evidence"] = self.evidence
        return d


@dataclass
class SearchResult:
    candidates: list[Candidate]
    visited: int = 0
    diagnostic: str | None = None
    relaxation_budget: int = 0

    def __iter__(self):
        return iter(self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    def ids(self) -> list[int]:
        return [c.node_id for c in self.candidates]


def range_fit(attr: float, rng: tuple[float, float] | None) -> float:
    if rng is None:
        return 1.0
    lo, hi = rng
    if hi == lo:
        return 1.0
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return min(1.0, max(0.0, 1.0 - abs(attr - mid) / half))


def label_coverage(node_labels: Iterable[str], profile: ConstraintProfile) -> float:
    if not profile.labels:
        return 1.0
    return len(profile.labels & set(node_labels)) / len(profile.labels)


def fused(sim: float, rf: float, lc: float, w: RankWeights) -> float:
    return w.w_sim * sim + w.w_range * rf + w.w_label * lc


_NUMERIC_OPS = {">=", ">", "<=", "<", "==", "=", "between"}
_ANY_OPS = {"any", "has_any", "in", "overlaps"}
_ALL_OPS = {"all", "has_all", "contains"}


def derive_profile(
    filters: Sequence[Filter | Mapping[str, Any]],
    attr_field: str | None = None,
    label_field: str | None = None,
    relaxation_budget: int = 0,
) -> ConstraintProfile:
    """Fold task filters into one interval and one label set.

    Numeric predicates intersect; label predicates union within their mode.
    A contradictory range yields a profile flagged unsatisfiable.
    """
    lo, hi = -math.inf, math.inf
    any_labels: set[str] = set()
    all_labels: set[str] = set()
    saw_range = False
    for f in filters:
        if isinstance(f, Mapping):
            f = Filter(f["field"], f["op"], f["value"])
        op = f.op.lower()
        if op in _NUMERIC_OPS:
            if attr_field is not None and f.field != attr_field:
                raise UserError(f"filter on {f.field!r} does not reference the indexed attribute {attr_field!r}")
            saw_range = True
            if op == "between":
                a, b = (float(x) for x in f.value)
                lo, hi = max(lo, a), min(hi, b)
            else:
                v = float(f.value)
                if op == ">=":
                    lo = max(lo, v)
                elif op == ">":
                    lo = max(lo, math.nextafter(v, math.inf))
                elif op == "<=":
                    hi = min(hi, v)
                elif op == "<":
                    hi = min(hi, math.nextafter(v, -math.inf))
                else:
                    lo, hi = max(lo, v), min(hi, v)
        elif op in _ANY_OPS or op in _ALL_OPS:
            if label_field is not None and f.field != label_field:
                raise UserError(f"filter on {f.field!r} does not reference the label field {label_field!r}")
            vals = [f.value] if isinstance(f.value, str) else list(f.value)
            (any_labels if op in _ANY_OPS else all_labels).update(vals)
        else:
            raise UserError(f"unsupported filter operator {f.op!r}")
    if any_labels and all_labels:
        raise UserError("cannot combine ANY and ALL label predicates in one profile")
    rng = (lo, hi) if saw_range else None
    mode = "all" if all_labels else "any"
    labels = frozenset(all_labels or any_labels)
    if rng is not None and lo > hi:
        return ConstraintProfile(rng, labels, mode, relaxation_budget, True, f"contradictory range [{lo}, {hi}]")
    return ConstraintProfile(rng, labels, mode, relaxation_budget)


# -- traversal --------------------------------------------------------------

class _Ctx:
    """Per-query constants for one partition."""

    def __init__(self, index: FusionIndex, profile: ConstraintProfile, weights: RankWeights):
        self.index = index
        self.profile = profile
        self.w = weights
        self.rng = profile.range
        self.want = index.vocab.encode(profile.labels, grow=False)
        self.n_want = len(profile.labels)
        self.unknown = any(not index.vocab.known(l) for l in profile.labels)
        self.all_mode = profile.label_mode == "all"
        self.visited = 0

    def impossible(self) -> str | None:
        p, idx = self.profile, self.index
        if p.unsatisfiable:
            return p.reason or "unsatisfiable profile"
        if len(idx) == 0:
            return "empty index"
        if self.rng is not None and (self.rng[1] < idx._attr_lo or self.rng[0] > idx._attr_hi):
            return "range excludes every indexed attribute value"
        if p.labels and self.want == 0:
            return "no indexed node carries any requested label"
        if p.labels and self.all_mode and self.unknown:
            return "a required label is absent from the label dictionary"
        return None

    def edge_ok(self, attr: float, labels: int) -> bool:
        # ALL mode prunes edges ANY-style; the full predicate is applied on emission
        if self.rng is not None and not (self.rng[0] <= attr <= self.rng[1]):
            return False
        return not self.n_want or bool(labels & self.want)

    def node_ok(self, attr: float, labels: int) -> bool:
        if self.rng is not None and not (self.rng[0] <= attr <= self.rng[1]):
            return False
        if not self.n_want:
            return True
        if self.all_mode:
            return not self.unknown and labels & self.want == self.want
        return bool(labels & self.want)

    def components(self, dist: float, attr: float, labels: int) -> tuple[float, float, float]:
        sim = self.index.similarity(dist)
        rf = range_fit(attr, self.rng)
        lc = 1.0 if not self.n_want else bin(labels & self.want).count("1") / self.n_want
        return sim, rf, lc

    def dists(self, q, idxs):
        self.visited += len(idxs)
        return self.index.dist_many(q, idxs)


def _descend(ctx: _Ctx, q: np.ndarray) -> tuple[int, float]:
    idx = ctx.index
    ep = idx._entry
    d = ctx.dists(q, [ep])[0]
    for lvl in range(idx.max_level, 0, -1):
        changed = True
        while changed:
            changed = False
            nbrs = [e[1] for e in idx._links[ep][lvl]]
            if not nbrs:
                break
            for v, dv in zip(nbrs, ctx.dists(q, nbrs)):
                if dv < d or (dv == d and idx._ids[v] < idx._ids[ep]):
                    ep, d, changed = v, dv, True
    return ep, d


def _constrained_layer0(ctx: _Ctx, q: np.ndarray, ep: int, ep_d: float, ef: int, budget: int, escalate_to: int | None):
    """Beam search restricted to the constraint subgraph.

    When the first pass ends with edges deferred for lack of budget and
    ``escalate_to`` exceeds ``budget``, the budget is raised and those edges
    are resumed (no work is repeated). Resumed routing nodes still face the
    beam bound, so a well-connected subgraph pays little for the second pass.
    Returns (results, final budget).
    """
    idx = ctx.index
    ids, attrs, labs, dead, links = idx._ids, idx._attr, idx._labels, idx._dead, idx._links
    w = ctx.w
    push, pop = heapq.heappush, heapq.heappop

    def prio(d, a, l, ok):
        sim, rf, lc = ctx.components(d, a, l)
        return fused(sim, rf, lc, w) if ok else w.w_sim * sim

    results: list[tuple[float, int, int, float]] = []  # min-heap of (score, -node_id, idx, dist)
    best_hops: dict[int, int] = {ep: 0}
    prio_of: dict[int, float] = {}
    deferred: list[tuple[int, int]] = []  # (node idx, hops) blocked by the budget
    ep_ok = ctx.node_ok(attrs[ep], labs[ep]) and not dead[ep]
    prio_of[ep] = prio(ep_d, attrs[ep], labs[ep], ep_ok)
    cand = [(-prio_of[ep], ids[ep], ep, 0)]
    if ep_ok:
        results.append((prio_of[ep], -ids[ep], ep, ep_d))

    def admit(pairs):
        fresh, fresh_hops = [], []
        for v, h in pairs:
            if h > budget:
                deferred.append((v, h))
                continue
            prev = best_hops.get(v)
            if prev is None:
                fresh.append(v)
                fresh_hops.append(h)
                best_hops[v] = h
            elif h < prev:
                # reached again with fewer consecutive routing hops: allow deeper expansion
                best_hops[v] = h
                push(cand, (-prio_of[v], ids[v], v, h))
        if not fresh:
            return
        for v, h, dv in zip(fresh, fresh_hops, ctx.dists(q, fresh)):
            ok = ctx.node_ok(attrs[v], labs[v]) and not dead[v]
            p = prio_of[v] = prio(dv, attrs[v], labs[v], ok)
            if ok:
                item = (p, -ids[v], v, dv)
                if len(results) < ef:
                    push(results, item)
                elif item > results[0]:
                    heapq.heappushpop(results, item)
                else:
                    continue
            elif len(results) >= ef and p < results[0][0]:
                continue
            push(cand, (-p, ids[v], v, h))

    while True:
        while cand:
            negp, nid, c, hops = pop(cand)
            if len(results) >= ef and (-negp, -nid) < (results[0][0], results[0][1]):
                break
            admit([(e[1], 0 if ctx.edge_ok(e[2], e[3]) else hops + 1) for e in links[c][0]])
        if escalate_to is None or budget >= escalate_to or not deferred:
            return results, budget
        budget = escalate_to
        pending, deferred = deferred, []
        admit(pending)


def _search_one(index: FusionIndex, q: np.ndarray, k: int, profile: ConstraintProfile, weights: RankWeights, ef: int) -> SearchResult:
    ctx = _Ctx(index, profile, weights)
    why = ctx.impossible()
    if why:
        return SearchResult([], 0, f"unsatisfiable: {why}", profile.relaxation_budget)
    ep, d = _descend(ctx, q)
    escalate = AUTO_RELAXATION if profile.relaxation_budget == 0 and not profile.unconstrained else None
    found, budget = _constrained_layer0(ctx, q, ep, d, ef, profile.relaxation_budget, escalate)
    out = []
    for _, _, v, dv in found:
        sim, rf, lc = ctx.components(dv, index._attr[v], index._labels[v])
        out.append(Candidate(index._ids[v], sim, rf, lc, fused(sim, rf, lc, weights)))
    out.sort(key=lambda c: (-c.score, c.node_id))
    diag = None if out else "no satisfying nodes reached"
    return SearchResult(out[:k], ctx.visited, diag, budget)


def _check_args(index, query, k: int, ef_search: int | None) -> tuple[np.ndarray, int]:
    if k < 1:
        raise UserError("k must be >= 1")
    ef = ef_search if ef_search is not None else max(k, 64)
    if ef < k:
        raise UserError("ef_search must be >= k")
    return _prepare(index, query), ef


def _prepare(index, query) -> np.ndarray:
    if isinstance(index, PartitionedIndex):
        part = next(iter(index.partitions.values()), None)
        if part is None:
            v = np.asarray(query, dtype=np.float64).reshape(-1)
            if v.shape[0] != index.dim:
                raise UserError(f"dimension mismatch: expected {index.dim}, got {v.shape[0]}")
            return v
        return part.prepare(query)
    return index.prepare(query)


def _merge(results: list[SearchResult], k: int, budget: int) -> SearchResult:
    cands = sorted((c for r in results for c in r.candidates), key=lambda c: (-c.score, c.node_id))[:k]
    visited = sum(r.visited for r in results)
    diag = None
    if not cands:
        diags = sorted({r.diagnostic for r in results if r.diagnostic})
        diag = "; ".join(diags) if diags else "unsatisfiable: no partitions"
    return SearchResult(cands, visited, diag, max([budget] + [r.relaxation_budget for r in results]))


def search(
    index: FusionIndex | PartitionedIndex,
    query: Sequence[float],
    k: int = 10,
    profile: ConstraintProfile | None = None,
    weights: RankWeights | None = None,
    ef_search: int | None = None,
    workers: int = 1,
) -> SearchResult:
    """Top-k constraint-satisfying nodes by fused score (ties by node id)."""
    profile = profile or ConstraintProfile()
    weights = weights or RankWeights()
    q, ef = _check_args(index, query, k, ef_search)
    if profile.unsatisfiable:
        return SearchResult([], 0, f"unsatisfiable: {profile.reason or 'empty profile'}", profile.relaxation_budget)
    if isinstance(index, FusionIndex):
        return _search_one(index, q, k, profile, weights, ef)
    parts = [index.partitions[key] for key in sorted(index.partitions)]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: _search_one(p, q, k, profile, weights, ef), parts))
    else:
        results = [_search_one(p, q, k, profile, weights, ef) for p in parts]
    return _merge(results, k, profile.relaxation_budget)


def brute_force(
    index: FusionIndex | PartitionedIndex | Sequence,
    query: Sequence[float],
    k: int = 10,
    profile: ConstraintProfile | None = None,
    weights: RankWeights | None = None,
    metric: str = "cosine",
) -> SearchResult:
    """Exact ranking by linear scan.

    ``index`` may also be a sequence of ``IndexNode``-like objects with label
    names, in which case ``metric`` selects the similarity mapping.
    """
    profile = profile or ConstraintProfile()
    weights = weights or RankWeights()
    if profile.unsatisfiable:
        return SearchResult([], 0, "unsatisfiable")
    if isinstance(index, PartitionedIndex):
        res = [brute_force(p, query, k, profile, weights) for p in index.partitions.values()]
        return _merge(res, k, 0)
    if isinstance(index, FusionIndex):
        live = [i for i in range(len(index._ids)) if not index._dead[i]]
        if not live:
            return SearchResult([])
        q = index.prepare(query)
        vocab = index.vocab
        rows = [(index._ids[i], index._vecs[i], index._attr[i], vocab.decode(index._labels[i])) for i in live]
        metric = index.params.metric
    else:
        rows = [(n.node_id, np.asarray(n.embedding, float), float(n.attr), frozenset(n.labels)) for n in index]
        if not rows:
            return SearchResult([])
        q = np.asarray(query, float)
        if metric == "cosine":
            q = q / np.linalg.norm(q)
    out = []
    for nid, vec, attr, labels in rows:
        if not profile.admits(attr, labels):
            continue
        if metric == "cosine":
            v = vec / np.linalg.norm(vec)
            sim = min(1.0, max(0.0, (1.0 + float(v @ q)) / 2.0))
        else:
            sim = 1.0 / (1.0 + float(np.linalg.norm(vec - q)))
        rf = range_fit(attr, profile.range)
        lc = label_coverage(labels, profile)
        out.append(Candidate(nid, sim, rf, lc, fused(sim, rf, lc, weights)))
    out.sort(key=lambda c: (-c.score, c.node_id))
    return SearchResult(out[:k], len(rows))


def search_then_filter(
    index: FusionIndex,
    query: Sequence[float],
    k: int,
    profile: ConstraintProfile,
    weights: RankWeights | None = None,
    ef_search: int = 128,
    selectivity: float | None = None,
) -> SearchResult:
    """Baseline: unconstrained beam search widened to ef/selectivity, then filter and rank."""
    weights = weights or RankWeights()
    q = index.prepare(query)
    ctx = _Ctx(index, profile, weights)
    if selectivity is None:
        live = [i for i in range(len(index._ids)) if not index._dead[i]]
        hits = sum(1 for i in live if ctx.node_ok(index._attr[i], index._labels[i]))
        selectivity = hits / max(1, len(live))
    if selectivity <= 0:
        return SearchResult([], 0, "unsatisfiable")
    ef = min(len(index), int(math.ceil(ef_search / selectivity)))
    ep, d = _descend(ctx, q)
    before = index.distance_evals
    found = index.search_layer(q, [(d, ep)], ef, 0)
    ctx.visited += index.distance_evals - before
    out = []
    for dv, nid, v in found:
        if index._dead[v] or not ctx.node_ok(index._attr[v], index._labels[v]):
            continue
        sim, rf, lc = ctx.components(dv, index._attr[v], index._labels[v])
        out.append(Candidate(nid, sim, rf, lc, fused(sim, rf, lc, weights)))
    out.sort(key=lambda c: (-c.score, c.node_id))
    return SearchResult(out[:k], ctx.visited)


def recall(found: Iterable[int], truth: Iterable[int]) -> float:
    truth = list(truth)
    if not truth:
        return 1.0
    return len(set(found) & set(truth)) / len(truth)


def evidence(candidate: Candidate, catalog, dataset: str, record_id: str | None, fields: Sequence[str]) -> dict:
    """Project the candidate's catalog record onto ``fields``; empty dict for a dangling node."""
    rec = catalog.get(dataset, record_id) if record_id is not None else None
    if rec is None:
        warnings.warn(f"node {candidate.node_id} has no live record in {dataset!r}", stacklevel=2)
        candidate.evidence = {}
        return {}
    slice_ = {f: rec.values.get(f) for f in fields}
    candidate.evidence = slice_
    return slice_

"""Working-set selection: utility scoring, dedup, slice coverage and leakage-safe segments."""

from __future__ import annotations

import hashlib
import heapq
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .catalog import Catalog, Record
from .errors import UserError
from .fusion_index import FusionIndex, IndexNode, IndexParams
from .search import RankWeights, search

W_WELLFORMED, W_DIVERSITY, W_SLICE = 0.4, 0.3, 0.3
LOW_SIGNAL = 0.2
SEGMENTS = ("train", "val", "serve")
_SIM_ONLY = RankWeights(1.0, 0.0, 0.0)


@dataclass(frozen=True)
class SelectionSpec:
    target: str
    budget: int
    metric: str = "accuracy"
    slice_keys: tuple[str, ...] = ()
    dedup_threshold: float = 0.95
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    entity_key: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "slice_keys", tuple(self.slice_keys))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if int(self.budget) < 1:
            raise UserError("budget must be >= 1")
        if not 0.0 <= self.dedup_threshold <= 1.0:
            raise UserError("dedup_threshold must lie in [0, 1]")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
            raise UserError(f"split fractions must be three positive numbers summing to 1, got {self.fractions}")

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Member:
    record_id: str
    weight: float
    segment: str
    content_hash: str = ""


@dataclass
class WorkingSet:
    members: list[Member]
    spec_hash: str
    source_snapshot: str = ""
    version: int = 1
    serve_from: int | None = None  # earliest timestamp of the serve window
    warnings: list[str] = field(default_factory=list)

    def ids(self, segment: str | None = None) -> list[str]:
        return [m.record_id for m in self.members if segment is None or m.segment == segment]

    def segment_of(self) -> dict[str, str]:
        return {m.record_id: m.segment for m in self.members}

    def to_manifest(self) -> dict:
        body = {
            "spec_hash": self.spec_hash,
            "source_snapshot": self.source_snapshot,
            "version": self.version,
            "serve_from": self.serve_from,
            "members": [
                {"record_id": m.record_id, "weight": m.weight, "segment": m.segment, "content_hash": m.content_hash}
                for m in self.members
            ],
        }
        return {**body, "manifest_id": _manifest_id(body)}

    @property
    def manifest_id(self) -> str:
        return self.to_manifest()["manifest_id"]

    @classmethod
    def from_manifest(cls, doc: dict) -> "WorkingSet":
        members = [Member(m["record_id"], m["weight"], m["segment"], m.get("content_hash", "")) for m in doc["members"]]
        return cls(members, doc["spec_hash"], doc.get("source_snapshot", ""), doc.get("version", 1), doc.get("serve_from"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "WorkingSet":
        return cls.from_manifest(json.loads(Path(path).read_text()))


def _manifest_id(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _unit(seed: int, key: str) -> float:
    h = hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") / 2.0**64


# -- scoring state ------------------------------------------------------------

class _Pool:
    """Per-record constants: wellformedness, content hash, slice key, group key, unit vector."""

    def __init__(self, records: Sequence[Record], spec: SelectionSpec, fields: Sequence[str] | None, vector_field: str | None):
        self.spec = spec
        self.records = {r.record_id: r for r in records}
        if fields is None:
            fields = sorted({k for r in records for k in r.values})
        self.fields = list(fields)
        known = set(self.fields)
        for name in [spec.target, *spec.slice_keys] + ([spec.entity_key] if spec.entity_key else []):
            if name not in known:
                raise UserError(f"unknown field {name!r}")
        self.vector_field = vector_field
        self.wellformed: dict[str, float] = {}
        self.hash: dict[str, str] = {}
        self.slice: dict[str, tuple] = {}
        self.vec: dict[str, np.ndarray | None] = {}
        for rid, r in self.records.items():
            nulls = sum(1 for f in self.fields if r.values.get(f) is None)
            self.wellformed[rid] = 1.0 - nulls / len(self.fields) if self.fields else 1.0
            self.hash[rid] = r.content_hash()
            self.slice[rid] = tuple(str(r.values.get(k)) for k in spec.slice_keys)
            self.vec[rid] = self._unit_vec(r.values.get(vector_field)) if vector_field else None

    @staticmethod
    def _unit_vec(v):
        if v is None:
            return None
        a = np.asarray(v, dtype=np.float64)
        n = float(np.linalg.norm(a))
        return a / n if n > 0 else None

    def group(self, rid: str) -> str:
        if self.spec.entity_key:
            val = self.records[rid].values.get(self.spec.entity_key)
            if val is not None:
                return f"e:{val}"
        return f"r:{rid}"


class _State:
    """The growing selection: slice fill counts and an index over selected vectors."""

    def __init__(self, pool: _Pool, n_slices: int):
        self.pool = pool
        self.quota = pool.spec.budget / max(1, n_slices)
        self.fill: dict[tuple, int] = {}
        self.weight: dict[str, float] = {}
        self.node_of: dict[str, int] = {}
        self._next = 0
        dim = next((len(v) for v in pool.vec.values() if v is not None), 0)
        self.index = FusionIndex(dim, IndexParams(max_degree=8, ef_construction=32)) if dim else None

    def diversity(self, rid: str) -> float:
        v = self.pool.vec[rid]
        if v is None or self.index is None or len(self.index) == 0:
            return 1.0
        best = search(self.index, v, 1, weights=_SIM_ONLY, ef_search=32).candidates
        if not best:
            return 1.0
        cos = 2.0 * best[0].sim - 1.0
        return 1.0 - max(0.0, cos) if cos >= self.pool.spec.dedup_threshold else 1.0

    def slice_boost(self, rid: str) -> float:
        if not self.pool.spec.slice_keys:
            return 1.0
        return 1.0 / (1.0 + self.fill.get(self.pool.slice[rid], 0) / self.quota)

    def utility(self, rid: str) -> float:
        p = self.pool
        return W_WELLFORMED * p.wellformed[rid] + W_DIVERSITY * self.diversity(rid) + W_SLICE * self.slice_boost(rid)

    def add(self, rid: str, weight: float) -> None:
        self.weight[rid] = weight
        s = self.pool.slice[rid]
        self.fill[s] = self.fill.get(s, 0) + 1
        v = self.pool.vec[rid]
        if v is not None and self.index is not None:
            self.node_of[rid] = self._next
            self.index.insert(IndexNode(self._next, v))
            self._next += 1

    def drop(self, rid: str) -> None:
        del self.weight[rid]
        self.fill[self.pool.slice[rid]] -= 1
        if rid in self.node_of:
            self.index.remove(self.node_of.pop(rid))


def _eligible(pool: _Pool, rids: Iterable[str], seen_hashes: set[str]) -> tuple[list[str], int, int]:
    """Drop exact duplicates (first record_id wins) and low-signal records."""
    keep, dups, low = [], 0, 0
    for rid in sorted(rids):
        if pool.wellformed[rid] < LOW_SIGNAL:
            low += 1
            continue
        h = pool.hash[rid]
        if h in seen_hashes:
            dups += 1
            continue
        seen_hashes.add(h)
        keep.append(rid)
    return keep, dups, low


def score_records(
    records: Sequence[Record],
    spec: SelectionSpec,
    fields: Sequence[str] | None = None,
    vector_field: str | None = None,
    selected: Iterable[str] = (),
) -> dict[str, float]:
    """Utility of every record given an (optional) already-selected set."""
    pool = _Pool(records, spec, fields, vector_field)
    selected = sorted(set(selected))
    state = _State(pool, len({pool.slice[r] for r in pool.records}))
    seen = set()
    for rid in selected:
        seen.add(pool.hash[rid])
        state.add(rid, 1.0)
    out = {}
    first = {}
    for rid in sorted(pool.records):
        first.setdefault(pool.hash[rid], rid)
    for rid in sorted(pool.records):
        h = pool.hash[rid]
        dup = first[h] != rid or (h in seen and rid not in selected)
        out[rid] = 0.0 if dup else state.utility(rid)
    return out


def _lazy_greedy(state: _State, cands: list[str], accept) -> None:
    """Pop candidates best-first with lazily refreshed utilities; ``accept(rid, u)`` decides."""
    heap = [(-state.utility(r), r) for r in cands]
    heapq.heapify(heap)
    while heap:
        neg, rid = heapq.heappop(heap)
        u = state.utility(rid)
        if heap and (-u, rid) > heap[0]:
            heapq.heappush(heap, (-u, rid))  # stale bound; utilities only shrink as the set grows
            continue
        if u > 0 and accept(rid, u) is False:
            break


# -- segments -----------------------------------------------------------------

def _hash_segment(spec: SelectionSpec, group: str, include_serve: bool) -> str:
    u = _unit(spec.seed, group)
    tr, va, _ = spec.fractions
    if include_serve:
        return "train" if u < tr else "val" if u < tr + va else "serve"
    return "train" if u < tr / (tr + va) else "val"


def _assign_segments(pool: _Pool, rids: list[str]) -> tuple[dict[str, str], int | None]:
    spec = pool.spec
    groups: dict[str, list[str]] = {}
    for rid in rids:
        groups.setdefault(pool.group(rid), []).append(rid)
    timed = bool(rids) and all(pool.records[r].timestamp is not None for r in rids)
    seg_of_group: dict[str, str] = {}
    serve_from = None
    if timed:
        latest = {g: max(pool.records[r].timestamp for r in rs) for g, rs in groups.items()}
        want = spec.fractions[2] * len(rids)
        taken = 0
        for g in sorted(groups, key=lambda g: (latest[g], g), reverse=True):
            if taken >= want:
                break
            seg_of_group[g] = "serve"
            taken += len(groups[g])
            serve_from = latest[g]
        for g in groups:
            seg_of_group.setdefault(g, _hash_segment(spec, g, include_serve=False))
    else:
        for g in groups:
            seg_of_group[g] = _hash_segment(spec, g, include_serve=True)
    return {rid: seg_of_group[pool.group(rid)] for rid in rids}, serve_from


# -- public operations --------------------------------------------------------

def select(
    records: Sequence[Record],
    spec: SelectionSpec,
    fields: Sequence[str] | None = None,
    vector_field: str | None = None,
    snapshot_id: str = "",
) -> WorkingSet:
    records = list(records)
    if not records:
        raise UserError("cannot select from an empty dataset")
    pool = _Pool(records, spec, fields, vector_field)
    notes = []
    cands, dups, low = _eligible(pool, pool.records, set())
    if spec.budget >= len(records):
        notes.append(f"budget {spec.budget} >= {len(records)} live rows; selecting every eligible row")
    state = _State(pool, len({pool.slice[r] for r in cands}))

    def accept(rid, u):
        state.add(rid, u)
        return len(state.weight) < spec.budget

    _lazy_greedy(state, cands, accept)
    if len(state.weight) < spec.budget:
        notes.append(f"shortfall: {len(state.weight)} of {spec.budget} selected ({dups} exact duplicates, {low} low-signal rows excluded)")
    chosen = sorted(state.weight)
    segs, serve_from = _assign_segments(pool, chosen)
    members = [Member(r, round(state.weight[r], 12), segs[r], pool.hash[r]) for r in chosen]
    for n in notes:
        warnings.warn(n, stacklevel=2)
    return WorkingSet(members, spec.spec_hash(), snapshot_id, 1, serve_from, notes)


def refresh(
    ws: WorkingSet,
    records: Sequence[Record],
    delta: Sequence[Record],
    spec: SelectionSpec,
    fields: Sequence[str] | None = None,
    vector_field: str | None = None,
    snapshot_id: str | None = None,
) -> WorkingSet:
    """Fold ``delta`` (new or changed records) into ``ws``.

    Members whose bytes are unchanged keep their segment. A new candidate may
    displace only the lowest-utility member of the segment it would join, so
    segment sizes and unaffected segments stay comparable across runs.
    """
    if spec.spec_hash() != ws.spec_hash:
        raise UserError("spec hash mismatch: the working set was selected under a different spec; run a new selection")
    current = {r.record_id: r for r in records}
    current.update({r.record_id: r for r in delta})
    pool = _Pool(list(current.values()), spec, fields, vector_field)
    delta_ids = {r.record_id for r in delta}
    retained = [m for m in ws.members if m.record_id in current and m.record_id not in delta_ids
                and pool.hash[m.record_id] == m.content_hash]
    seen = {pool.hash[m.record_id] for m in retained}
    cands, dups, low = _eligible(pool, delta_ids - {m.record_id for m in retained}, seen)

    seg = {m.record_id: m.segment for m in retained}
    group_seg: dict[str, str] = {pool.group(m.record_id): m.segment for m in retained}
    new_groups: dict[str, list[str]] = {}
    for rid in cands:
        g = pool.group(rid)
        if g not in group_seg:
            new_groups.setdefault(g, []).append(rid)
    for g, rids in sorted(new_groups.items()):
        ts = [pool.records[r].timestamp for r in rids]
        if ws.serve_from is not None and all(t is not None for t in ts):
            group_seg[g] = "serve" if max(ts) >= ws.serve_from else _hash_segment(spec, g, include_serve=False)
        else:
            group_seg[g] = _hash_segment(spec, g, include_serve=ws.serve_from is None)
    for rid in cands:
        seg[rid] = group_seg[pool.group(rid)]

    state = _State(pool, len({pool.slice[r] for r in [*cands, *seg]}))
    for m in retained:
        state.add(m.record_id, m.weight)
    displaced = []

    def accept(rid, u):
        if len(state.weight) < spec.budget:
            state.add(rid, u)
            return True
        same = [r for r in state.weight if seg[r] == seg[rid]]
        if not same:
            return True
        low_rid = min(same, key=lambda r: (state.weight[r], r))
        if u > state.weight[low_rid]:
            state.drop(low_rid)
            displaced.append(low_rid)
            state.add(rid, u)
        return True

    _lazy_greedy(state, cands, accept)
    notes = []
    if displaced:
        notes.append(f"{len(displaced)} members displaced by higher-utility records")
    chosen = sorted(state.weight)
    members = [Member(r, round(state.weight[r], 12), seg[r], pool.hash[r]) for r in chosen]
    serve_from = ws.serve_from
    snap = ws.source_snapshot if snapshot_id is None else snapshot_id
    return WorkingSet(members, ws.spec_hash, snap, ws.version + 1, serve_from, notes)


# -- catalog adapters ---------------------------------------------------------

def _dataset_args(catalog: Catalog, dataset_id: str):
    desc = catalog.descriptor(dataset_id)
    vec = desc.vector_field
    fields = [f.name for f in desc.schema]
    return fields, vec.name if vec is not None else None


def select_dataset(catalog: Catalog, dataset_id: str, spec: SelectionSpec, tenant: str | None = None) -> WorkingSet:
    fields, vec = _dataset_args(catalog, dataset_id)
    return select(list(catalog.records(dataset_id, tenant)), spec, fields, vec, catalog.snapshot_id(dataset_id))


def refresh_dataset(ws: WorkingSet, catalog: Catalog, dataset_id: str, spec: SelectionSpec, delta_ids: Iterable[str]) -> WorkingSet:
    fields, vec = _dataset_args(catalog, dataset_id)
    recs = list(catalog.records(dataset_id))
    live = {r.record_id: r for r in recs}
    delta = [live[i] for i in delta_ids if i in live]
    return refresh(ws, recs, delta, spec, fields, vec, catalog.snapshot_id(dataset_id))

"""Constraint-fused navigable small-world graph.

Every node carries an embedding, one sortable numeric attribute and a label
bitmap. Adjacency entries keep copies of the neighbour's attribute and labels
so a traversal can reject an edge without touching the neighbour itself.

Neighbour selection uses a dominance rule: a candidate ``c`` is dropped when an
already selected ``s`` is closer to ``c`` than the new node is *and* ``s``
covers the same attribute region and label region as ``c``. Edges that bridge
distinct attribute ranges or label groups therefore survive pruning.
"""

from __future__ import annotations

import hashlib
import heapq
import io
import json
import math
import struct
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptionError, DuplicateError, UnknownIdError, UserError

MAGIC = b"AIXL"
FORMAT_VERSION = 1
MAX_LEVEL = 32
COMPACT_FRACTION = 0.2
_METRICS = ("cosine", "euclidean")


@dataclass(frozen=True)
class IndexParams:
    metric: str = "cosine"
    max_degree: int = 16
    ef_construction: int = 128
    layer_decay: float = 1 / math.e
    partition: tuple[str, str] = ("default", "all")
    seed: int = 0
    attr_quantile: float = 0.25

    def validate(self) -> None:
        if self.metric not in _METRICS:
            raise UserError(f"unknown metric {self.metric!r}")
        if self.max_degree < 1:
            raise UserError("max_degree must be positive")
        if self.ef_construction < self.max_degree:
            raise UserError("ef_construction must be >= max_degree")
        if not 0 < self.layer_decay < 1:
            raise UserError("layer_decay must lie in (0, 1)")
        if not 0 <= self.attr_quantile <= 1:
            raise UserError("attr_quantile must lie in [0, 1]")


@dataclass
class IndexNode:
    node_id: int
    embedding: Sequence[float]
    attr: float = 0.0
    labels: Iterable[str] | int = ()


@dataclass(frozen=True)
class AdjacencyEntry:
    neighbor_id: int
    neighbor_attr: float
    neighbor_labels: int
    distance: float


@dataclass
class BuildReport:
    node_count: int
    edge_count: int
    level_histogram: dict[int, int] = field(default_factory=dict)


class LabelVocab:
    """Dataset-level label dictionary; each label owns one bit."""

    def __init__(self, labels: Iterable[str] = ()):
        self.labels: list[str] = []
        self._bit: dict[str, int] = {}
        for lab in labels:
            self.add(lab)

    def add(self, label: str) -> int:
        if label not in self._bit:
            self._bit[label] = len(self.labels)
            self.labels.append(label)
        return self._bit[label]

    def encode(self, labels: Iterable[str] | int, grow: bool = True) -> int:
        if isinstance(labels, int):
            return labels
        mask = 0
        for lab in labels:
            if grow:
                mask |= 1 << self.add(lab)
            elif lab in self._bit:
                mask |= 1 << self._bit[lab]
        return mask

    def known(self, label: str) -> bool:
        return label in self._bit

    def decode(self, mask: int) -> frozenset[str]:
        return frozenset(lab for i, lab in enumerate(self.labels) if mask >> i & 1)

    def __len__(self) -> int:
        return len(self.labels)


def _varint(n: int, out: bytearray) -> None:
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return


def _read_varint(buf: memoryview, pos: int) -> tuple[int, int]:
    shift = result = 0
    while True:
        if pos >= len(buf):
            raise CorruptionError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


class FusionIndex:
    """One fusion graph (a single tenant/time-bucket partition)."""

    def __init__(self, dim: int, params: IndexParams | None = None, vocab: LabelVocab | None = None):
        if dim < 1:
            raise UserError("dimension must be positive")
        self.params = params or IndexParams()
        self.params.validate()
        self.dim = dim
        self.vocab = vocab or LabelVocab()
        self._ids: list[int] = []
        self._idx: dict[int, int] = {}
        self._vecs = np.zeros((16, dim))
        self._attr: list[float] = []
        self._labels: list[int] = []
        self._level: list[int] = []
        self._dead: list[bool] = []
        # _links[i][lvl] -> list of (neighbor_id, neighbor_idx, attr copy, labels copy, distance)
        self._links: list[list[list[tuple]]] = []
        self._inrefs: list[set[tuple[int, int]]] = []
        # layer-0 spanning tree rooted at the entry point; its edges are never pruned
        self._kids: list[set[int]] = []
        self._entry: int | None = None
        self._max_level = -1
        self._n_inserted = 0
        self._n_dead = 0
        self._attr_lo = math.inf
        self._attr_hi = -math.inf
        self.distance_evals = 0

    # -- basic properties -----------------------------------------------
    def __len__(self) -> int:
        return len(self._ids) - self._n_dead

    def __contains__(self, node_id: int) -> bool:
        i = self._idx.get(node_id)
        return i is not None and not self._dead[i]

    @property
    def entry_id(self) -> int | None:
        return None if self._entry is None else self._ids[self._entry]

    @property
    def max_level(self) -> int:
        return self._max_level

    def node_ids(self) -> list[int]:
        return sorted(self._ids[i] for i in range(len(self._ids)) if not self._dead[i])

    def node(self, node_id: int) -> IndexNode:
        i = self._live_idx(node_id)
        return IndexNode(node_id, self._vecs[i].copy(), self._attr[i], self._labels[i])

    def level_of(self, node_id: int) -> int:
        return self._level[self._live_idx(node_id)]

    def neighbors(self, node_id: int, level: int = 0) -> list[AdjacencyEntry]:
        i = self._live_idx(node_id)
        if level > self._level[i]:
            return []
        return [AdjacencyEntry(e[0], e[2], e[3], e[4]) for e in self._links[i][level]]

    def _live_idx(self, node_id: int) -> int:
        i = self._idx.get(node_id)
        if i is None or self._dead[i]:
            raise UnknownIdError(f"unknown-id: node {node_id!r}")
        return i

    # -- distances --------------------------------------------------------
    def prepare(self, vector: Sequence[float]) -> np.ndarray:
        v = np.asarray(vector, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise UserError(f"dimension mismatch: expected {self.dim}, got {v.shape[0]}")
        if self.params.metric == "cosine":
            n = float(np.linalg.norm(v))
            if n == 0.0 or not math.isfinite(n):
                raise UserError("cannot normalise a zero or non-finite vector")
            v = v / n
        return v

    def dist_many(self, q: np.ndarray, idxs: Sequence[int]) -> list[float]:
        self.distance_evals += len(idxs)
        m = self._vecs[list(idxs)]
        if self.params.metric == "cosine":
            return (1.0 - m @ q).tolist()
        return np.sqrt(((m - q) ** 2).sum(axis=1)).tolist()

    def similarity(self, distance: float) -> float:
        """Map a distance to [0, 1]: (1+cos)/2 for cosine, 1/(1+d) for euclidean."""
        if self.params.metric == "cosine":
            return min(1.0, max(0.0, (2.0 - distance) / 2.0))
        return 1.0 / (1.0 + distance)

    def _pair_matrix(self, idxs: Sequence[int]) -> np.ndarray:
        m = self._vecs[list(idxs)]
        if self.params.metric == "cosine":
            return 1.0 - m @ m.T
        sq = (m * m).sum(axis=1)
        return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * (m @ m.T), 0.0))

    # -- graph primitives -------------------------------------------------
    def _draw_level(self) -> int:
        key = f"{self.params.seed}:{self._n_inserted}".encode()
        u = (int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big") + 1) / 2.0**64
        return min(MAX_LEVEL, int(math.floor(math.log(u) / math.log(self.params.layer_decay))))

    def _greedy(self, q: np.ndarray, ep: int, ep_dist: float, level: int) -> tuple[int, float]:
        cur, cur_d = ep, ep_dist
        changed = True
        while changed:
            changed = False
            nbrs = [e[1] for e in self._links[cur][level]]
            if not nbrs:
                break
            for v, d in zip(nbrs, self.dist_many(q, nbrs)):
                if d < cur_d or (d == cur_d and self._ids[v] < self._ids[cur]):
                    cur, cur_d, changed = v, d, True
        return cur, cur_d

    def descend(self, q: np.ndarray, to_level: int = 0) -> tuple[int, float]:
        """Greedy walk from the entry point down to ``to_level``; returns (idx, dist)."""
        ep = self._entry
        d = self.dist_many(q, [ep])[0]
        for lvl in range(self._max_level, to_level, -1):
            ep, d = self._greedy(q, ep, d, lvl)
        return ep, d

    def search_layer(self, q: np.ndarray, entries: list[tuple[float, int]], ef: int, level: int) -> list[tuple[float, int, int]]:
        """Beam search on one layer. Returns up to ``ef`` (dist, node_id, idx), nearest first."""
        ids = self._ids
        links = self._links
        visited = {i for _, i in entries}
        cand = [(d, ids[i], i) for d, i in entries]
        heapq.heapify(cand)
        res = [(-d, -ids[i], i) for d, i in entries]
        heapq.heapify(res)
        while len(res) > ef:
            heapq.heappop(res)
        push, pop, pushpop = heapq.heappush, heapq.heappop, heapq.heappushpop
        while cand:
            d, nid, c = pop(cand)
            if len(res) >= ef and (d, nid) > (-res[0][0], -res[0][1]):
                break
            fresh = [e[1] for e in links[c][level] if e[1] not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for v, dv in zip(fresh, self.dist_many(q, fresh)):
                if len(res) < ef:
                    push(cand, (dv, ids[v], v))
                    push(res, (-dv, -ids[v], v))
                elif dv < -res[0][0] or (dv == -res[0][0] and ids[v] < -res[0][1]):
                    push(cand, (dv, ids[v], v))
                    pushpop(res, (-dv, -ids[v], v))
        return sorted((-d, -n, i) for d, n, i in res)

    def _select(self, cands: list[tuple[float, int, int]], m: int) -> list[tuple[float, int, int]]:
        """Dominance pruning over candidates sorted by (distance, node_id)."""
        n = len(cands)
        if n <= 1:
            return list(cands)
        span = self._attr_hi - self._attr_lo if self._attr_hi >= self._attr_lo else 0.0
        idxs = [c[2] for c in cands]
        d_u = np.array([c[0] for c in cands])
        pair = self._pair_matrix(idxs)
        attrs = np.array([self._attr[i] for i in idxs])
        close = np.abs(attrs[:, None] - attrs[None, :]) <= self.params.attr_quantile * span
        labs = [self._labels[i] for i in idxs]
        lab = np.array(labs, dtype=np.uint64 if len(self.vocab) <= 64 else object)
        share = (lab[:, None] & lab[None, :]) != 0
        unlabeled = lab == 0
        same_region = share | (unlabeled[:, None] & unlabeled[None, :])
        # dominated_by[c][s]: selected s would prune candidate c
        dominated_by = ((pair < d_u[None, :]) & close & same_region).T.tolist()
        chosen: list[int] = []
        for j in range(n):
            if len(chosen) >= m:
                break
            row = dominated_by[j]
            for s in chosen:
                if row[s]:
                    break
            else:
                chosen.append(j)
        return [cands[j] for j in chosen]

    def _entry_tuple(self, v: int, d: float) -> tuple:
        return (self._ids[v], v, self._attr[v], self._labels[v], d)

    def _set_links(self, u: int, level: int, chosen: list[tuple[float, int, int]]) -> None:
        if level == 0 and self._kids[u]:
            chosen = self._keep_tree_edges(u, chosen)
        old = {e[1] for e in self._links[u][level]}
        new = sorted((self._entry_tuple(v, d) for d, _, v in chosen), key=lambda e: e[0])
        self._links[u][level] = new
        new_set = {e[1] for e in new}
        for v in old - new_set:
            self._inrefs[v].discard((u, level))
        for v in new_set - old:
            self._inrefs[v].add((u, level))

    def _keep_tree_edges(self, u: int, chosen: list[tuple[float, int, int]]) -> list[tuple[float, int, int]]:
        present = {c[2] for c in chosen}
        missing = [v for v in self._kids[u] if v not in present]
        if not missing:
            return chosen
        known = {e[1]: e[4] for e in self._links[u][0]}
        need = [v for v in missing if v not in known]
        if need:
            known.update(zip(need, self.dist_many(self._vecs[u], need)))
        tree = [(known[v], self._ids[v], v) for v in missing]
        rest = sorted(c for c in chosen if c[2] not in self._kids[u])
        keep = [c for c in chosen if c[2] in self._kids[u]] + tree
        return sorted(keep + rest[: max(0, self.params.max_degree - len(keep))])

    def _adopt(self, parent: int, child: int) -> None:
        self._kids[parent].add(child)
        self._set_links(parent, 0, [(e[4], e[0], e[1]) for e in self._links[parent][0]])

    def _rebuild_tree(self, live_only: bool) -> None:
        """Re-derive the spanning tree by BFS from the entry; attach stragglers to their nearest reached node."""
        n_all = len(self._ids)
        self._kids = [set() for _ in range(n_all)]
        if self._entry is None:
            return
        m = self.params.max_degree
        seen = [False] * n_all
        seen[self._entry] = True
        reached = [self._entry]

        def grow(start):
            queue = deque([start])
            while queue:
                u = queue.popleft()
                for e in self._links[u][0]:
                    v = e[1]
                    if seen[v] or (live_only and self._dead[v]):
                        continue
                    seen[v] = True
                    self._kids[u].add(v)
                    reached.append(v)
                    queue.append(v)

        grow(self._entry)
        for n in range(n_all):
            if seen[n] or self._dead[n]:
                continue
            hosts = [h for h in reached if len(self._kids[h]) < m and not self._dead[h]]
            ds = self.dist_many(self._vecs[n], hosts)
            _, host = min(zip(ds, hosts), key=lambda t: (t[0], self._ids[t[1]]))
            seen[n] = True
            reached.append(n)
            self._adopt(host, n)
            grow(n)

    def _indegree(self, v: int, level: int) -> int:
        return sum(1 for (_, lvl) in self._inrefs[v] if lvl == level)

    def _add_reverse(self, n: int, u: int, d: float, level: int) -> None:
        links = self._links[n][level]
        if any(e[1] == u for e in links):
            return
        has_dead = any(self._dead[e[1]] for e in links)
        if len(links) < self.params.max_degree and not has_dead:
            entry = self._entry_tuple(u, d)
            links.append(entry)
            links.sort(key=lambda e: e[0])
            self._inrefs[u].add((n, level))
            return
        cands = self._repair_candidates(n, level)
        if not any(c[2] == u for c in cands):
            cands.append((d, self._ids[u], u))
        cands.sort()
        chosen = self._select(cands, self.params.max_degree)
        chosen = self._protect_orphans(n, level, cands, chosen)
        self._set_links(n, level, chosen)

    def _protect_orphans(self, n, level, cands, chosen):
        """Keep a dropped node whose only incoming edge at ``level`` is from ``n``."""
        m = self.params.max_degree
        kept = {c[2] for c in chosen}
        current = {e[1] for e in self._links[n][level]}
        for c in cands:
            v = c[2]
            if v in kept:
                continue
            indeg = self._indegree(v, level) - (1 if v in current else 0)
            if indeg > 0:
                continue
            if len(chosen) < m:
                chosen.append(c)
                kept.add(v)
                continue
            # evict the farthest chosen node that has another way in
            for k in range(len(chosen) - 1, -1, -1):
                w = chosen[k][2]
                w_in = self._indegree(w, level) - (1 if w in current else 0)
                if w_in > 0:
                    chosen[k] = c
                    kept.discard(w)
                    kept.add(v)
                    break
        chosen.sort()
        return chosen

    def _repair_candidates(self, n: int, level: int) -> list[tuple[float, int, int]]:
        """Live neighbours of ``n`` plus live neighbours of its tombstoned neighbours."""
        links = self._links[n][level]
        if not any(self._dead[e[1]] for e in links):
            return sorted((e[4], e[0], e[1]) for e in links)
        out: dict[int, None] = {}
        for e in links:
            v = e[1]
            if not self._dead[v]:
                out[v] = None
            else:
                for e2 in self._links[v][level] if level <= self._level[v] else ():
                    w = e2[1]
                    if w != n and not self._dead[w]:
                        out[w] = None
        idxs = list(out)
        if not idxs:
            return []
        ds = self.dist_many(self._vecs[n], idxs)
        return sorted((d, self._ids[v], v) for v, d in zip(idxs, ds))

    # -- public mutation API ------------------------------------------------
    def insert(self, node: IndexNode) -> None:
        nid = int(node.node_id)
        if nid < 0:
            raise UserError("node ids must be non-negative integers")
        if nid in self._idx:
            raise DuplicateError(f"duplicate id: node {nid}")
        q = self.prepare(node.embedding)
        attr = float(node.attr)
        if not math.isfinite(attr):
            raise UserError("attr must be finite")
        labels = self.vocab.encode(node.labels)
        level = self._draw_level()
        self._n_inserted += 1

        u = len(self._ids)
        if u >= self._vecs.shape[0]:
            grown = np.zeros((max(16, 2 * self._vecs.shape[0]), self.dim))
            grown[:u] = self._vecs[:u]
            self._vecs = grown
        self._vecs[u] = q
        self._ids.append(nid)
        self._idx[nid] = u
        self._attr.append(attr)
        self._labels.append(labels)
        self._level.append(level)
        self._dead.append(False)
        self._links.append([[] for _ in range(level + 1)])
        self._inrefs.append(set())
        self._kids.append(set())
        self._attr_lo = min(self._attr_lo, attr)
        self._attr_hi = max(self._attr_hi, attr)

        if self._entry is None:
            self._entry, self._max_level = u, level
            return
        ep, d = self.descend(q, to_level=level)
        entries = [(d, ep)]
        m = self.params.max_degree
        for lvl in range(min(level, self._max_level), -1, -1):
            found = self.search_layer(q, entries, self.params.ef_construction, lvl)
            cands = [c for c in found if not self._dead[c[2]]]
            chosen = self._select(cands, m)
            self._set_links(u, lvl, chosen)
            for d_un, _, n in chosen:
                self._add_reverse(n, u, d_un, lvl)
            entries = [(c[0], c[2]) for c in found]
            if lvl == 0:
                parent = self._pick_parent(u, cands)
                if parent is None:
                    self.compact()  # frees tree slots and attaches u while rebuilding
                else:
                    self._adopt(parent, u)
        if level > self._max_level:
            old = self._entry
            self._entry, self._max_level = u, level
            self._adopt(u, old)

    def _pick_parent(self, u: int, cands: list[tuple[float, int, int]]) -> int | None:
        m = self.params.max_degree
        cap = max(1, m // 2)
        for _, _, v in cands:
            if len(self._kids[v]) < cap:
                return v
        for limit in (cap, m):
            others = [i for i in range(len(self._ids)) if i != u and not self._dead[i] and len(self._kids[i]) < limit]
            if others:
                ds = self.dist_many(self._vecs[u], others)
                return min(zip(ds, others), key=lambda t: (t[0], self._ids[t[1]]))[1]
        return None  # every live node is saturated with tombstoned children

    def build(self, nodes: Iterable[IndexNode]) -> BuildReport:
        if self._ids:
            raise UserError("build requires an empty index")
        for node in nodes:
            self.insert(node)
        return self.report()

    def report(self) -> BuildReport:
        live = [i for i in range(len(self._ids)) if not self._dead[i]]
        edges = sum(len(l) for i in live for l in self._links[i])
        hist = Counter(self._level[i] for i in live)
        return BuildReport(len(live), edges, dict(sorted(hist.items())))

    def remove(self, node_id: int) -> None:
        i = self._live_idx(node_id)
        self._dead[i] = True
        self._n_dead += 1
        if self._n_dead > COMPACT_FRACTION * len(self._ids):
            if i == self._entry:
                self._elect_entry()
            self.compact()
        elif i == self._entry:
            self._elect_entry()
            self._rebuild_tree(live_only=False)

    def _elect_entry(self) -> None:
        live = [i for i in range(len(self._ids)) if not self._dead[i]]
        if not live:
            self._entry, self._max_level = None, -1
            return
        best = max(live, key=lambda i: (self._level[i], -self._ids[i]))
        self._entry, self._max_level = best, self._level[best]

    def compact(self) -> int:
        """Rewrite every list that references a tombstone; returns lists rewritten."""
        rewritten = 0
        self._kids = [set() for _ in self._ids]  # rebuilt below over live edges only
        for n in range(len(self._ids)):
            if self._dead[n]:
                continue
            for lvl in range(self._level[n] + 1):
                if any(self._dead[e[1]] for e in self._links[n][lvl]):
                    cands = self._repair_candidates(n, lvl)
                    chosen = self._select(cands, self.params.max_degree)
                    chosen = self._protect_orphans(n, lvl, cands, chosen)
                    self._set_links(n, lvl, chosen)
                    rewritten += 1
        for n in range(len(self._ids)):
            if self._dead[n]:
                for lvl in range(len(self._links[n])):
                    self._set_links(n, lvl, [])
        self._rebuild_tree(live_only=True)
        return rewritten

    def set_metadata(self, node_id: int, attr: float | None = None, labels: Iterable[str] | int | None = None) -> None:
        """Mutate a node's attribute/labels. Edge copies go stale until refreshed."""
        i = self._live_idx(node_id)
        if attr is not None:
            self._attr[i] = float(attr)
            self._attr_lo = min(self._attr_lo, float(attr))
            self._attr_hi = max(self._attr_hi, float(attr))
        if labels is not None:
            self._labels[i] = self.vocab.encode(labels)

    def refresh_edge_metadata(self, node_id: int) -> int:
        v = self._live_idx(node_id)
        updated = 0
        for u, lvl in self._inrefs[v]:
            links = self._links[u][lvl]
            for k, e in enumerate(links):
                if e[1] == v and (e[2] != self._attr[v] or e[3] != self._labels[v]):
                    links[k] = (e[0], v, self._attr[v], self._labels[v], e[4])
                    updated += 1
        return updated

    def refresh_all(self) -> int:
        return sum(self.refresh_edge_metadata(n) for n in self.node_ids())

    # -- diagnostics ----------------------------------------------------------
    def reachable(self, live_only: bool = True) -> set[int]:
        """Node ids reachable from the entry point over layer-0 edges."""
        if self._entry is None:
            return set()
        seen = {self._entry}
        queue = deque([self._entry])
        while queue:
            u = queue.popleft()
            for e in self._links[u][0]:
                v = e[1]
                if v in seen or (live_only and self._dead[v]):
                    continue
                seen.add(v)
                queue.append(v)
        return {self._ids[i] for i in seen if not self._dead[i]}

    def edge_set(self) -> set[tuple[int, int, int]]:
        return {
            (self._ids[u], lvl, e[0])
            for u in range(len(self._ids))
            if not self._dead[u]
            for lvl, links in enumerate(self._links[u])
            for e in links
        }

    def max_out_degree(self) -> int:
        return max((len(l) for links in self._links for l in links), default=0)

    # -- serialization ----------------------------------------------------------
    def serialize(self) -> bytes:
        p = self.params
        header = {
            "ef_construction": p.ef_construction,
            "layer_decay": p.layer_decay,
            "partition": list(p.partition),
            "seed": p.seed,
            "attr_quantile": p.attr_quantile,
            "vocab": self.vocab.labels,
            "entry": self.entry_id,
            "max_level": self._max_level,
            "n_inserted": self._n_inserted,
            "attr_span": [self._attr_lo, self._attr_hi] if self._ids else None,
        }
        hjson = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HBII", FORMAT_VERSION, _METRICS.index(p.metric), self.dim, p.max_degree))
        buf.write(struct.pack("<I", len(hjson)))
        buf.write(hjson)
        order = sorted(range(len(self._ids)), key=lambda i: self._ids[i])
        words = max(1, (len(self.vocab) + 63) // 64)
        buf.write(struct.pack("<QI", len(order), words))
        # node section: fixed stride payloads in node_id order
        rec = struct.Struct(f"<QBBd{words}Q{self.dim}d")
        mask64 = (1 << 64) - 1
        for i in order:
            lab = self._labels[i]
            lab_words = [(lab >> (64 * w)) & mask64 for w in range(words)]
            buf.write(rec.pack(self._ids[i], self._level[i], int(self._dead[i]), self._attr[i], *lab_words, *self._vecs[i].tolist()))
        # adjacency section: per node, per level, count + delta-encoded ids
        adj = bytearray()
        for i in order:
            for lvl in range(self._level[i] + 1):
                ids = [e[0] for e in self._links[i][lvl]]
                _varint(len(ids), adj)
                prev = 0
                for nid in ids:
                    _varint(nid - prev, adj)
                    prev = nid
        buf.write(struct.pack("<Q", len(adj)))
        buf.write(bytes(adj))
        body = buf.getvalue()
        return body + _checksum(body)

    @classmethod
    def deserialize(cls, data: bytes) -> "FusionIndex":
        if len(data) < 12 or data[:4] != MAGIC:
            raise CorruptionError("not an index stream (bad magic)")
        body, trailer = data[:-8], data[-8:]
        if _checksum(body) != trailer:
            raise CorruptionError("checksum mismatch")
        try:
            return cls._parse(memoryview(body))
        except (struct.error, ValueError, KeyError, IndexError) as exc:
            raise CorruptionError(f"malformed index stream: {exc}") from None

    @classmethod
    def _parse(cls, mv: memoryview) -> "FusionIndex":
        pos = 4
        version, metric, dim, m = struct.unpack_from("<HBII", mv, pos)
        pos += struct.calcsize("<HBII")
        if version != FORMAT_VERSION:
            raise CorruptionError(f"unsupported index format version {version}")
        (hlen,) = struct.unpack_from("<I", mv, pos)
        pos += 4
        header = json.loads(bytes(mv[pos : pos + hlen]))
        pos += hlen
        params = IndexParams(
            metric=_METRICS[metric],
            max_degree=m,
            ef_construction=header["ef_construction"],
            layer_decay=header["layer_decay"],
            partition=tuple(header["partition"]),
            seed=header["seed"],
            attr_quantile=header["attr_quantile"],
        )
        idx = cls(dim, params, LabelVocab(header["vocab"]))
        n, words = struct.unpack_from("<QI", mv, pos)
        pos += struct.calcsize("<QI")
        rec = struct.Struct(f"<QBBd{words}Q{dim}d")
        idx._vecs = np.zeros((max(16, n), dim))
        for i in range(n):
            vals = rec.unpack_from(mv, pos)
            pos += rec.size
            nid, level, dead, attr = vals[:4]
            lab = 0
            for w, word in enumerate(vals[4 : 4 + words]):
                lab |= word << (64 * w)
            idx._ids.append(nid)
            idx._idx[nid] = i
            idx._vecs[i] = vals[4 + words :]
            idx._attr.append(attr)
            idx._labels.append(lab)
            idx._level.append(level)
            idx._dead.append(bool(dead))
            idx._links.append([[] for _ in range(level + 1)])
            idx._inrefs.append(set())
        idx._n_dead = sum(idx._dead)
        (alen,) = struct.unpack_from("<Q", mv, pos)
        pos += 8
        end = pos + alen
        for i in range(n):
            for lvl in range(idx._level[i] + 1):
                cnt, pos = _read_varint(mv, pos)
                prev = 0
                ids = []
                for _ in range(cnt):
                    delta, pos = _read_varint(mv, pos)
                    prev += delta
                    ids.append(prev)
                targets = [idx._idx[t] for t in ids]
                ds = idx.dist_many(idx._vecs[i], targets) if targets else []
                idx._links[i][lvl] = [idx._entry_tuple(v, d) for v, d in zip(targets, ds)]
                for v in targets:
                    idx._inrefs[v].add((i, lvl))
        if pos != end:
            raise CorruptionError("adjacency section length mismatch")
        idx._entry = None if header["entry"] is None else idx._idx[header["entry"]]
        idx._max_level = header["max_level"]
        idx._n_inserted = header["n_inserted"]
        if header["attr_span"]:
            idx._attr_lo, idx._attr_hi = header["attr_span"]
        idx._kids = [set() for _ in range(n)]
        idx._rebuild_tree(live_only=False)
        idx.distance_evals = 0
        return idx

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path) -> "FusionIndex":
        with open(path, "rb") as fh:
            return cls.deserialize(fh.read())


class PartitionedIndex:
    """One :class:`FusionIndex` per (tenant, time bucket) sharing a label vocabulary."""

    def __init__(self, dim: int, params: IndexParams | None = None):
        self.dim = dim
        self.params = params or IndexParams()
        self.vocab = LabelVocab()
        self.partitions: dict[tuple[str, str], FusionIndex] = {}

    def partition(self, key: tuple[str, str]) -> FusionIndex:
        idx = self.partitions.get(key)
        if idx is None:
            p = IndexParams(**{**self.params.__dict__, "partition": tuple(key)})
            idx = self.partitions[key] = FusionIndex(self.dim, p, self.vocab)
        return idx

    def insert(self, node: IndexNode, key: tuple[str, str] = ("default", "all")) -> None:
        for k, part in self.partitions.items():
            if k != tuple(key) and node.node_id in part:
                raise DuplicateError(f"duplicate id: node {node.node_id}")
        self.partition(tuple(key)).insert(node)

    def locate(self, node_id: int) -> FusionIndex:
        for part in self.partitions.values():
            if node_id in part:
                return part
        raise UnknownIdError(f"unknown-id: node {node_id!r}")

    def remove(self, node_id: int) -> None:
        self.locate(node_id).remove(node_id)

    def __len__(self) -> int:
        return sum(len(p) for p in self.partitions.values())

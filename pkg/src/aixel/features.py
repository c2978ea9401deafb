"""Feature suite: CMI feature selection, interaction mining and two-view embeddings."""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .catalog import Record
from .errors import UserError
from .learners import baseline_for
from .metrics import evaluate, improvement

DEFAULT_BINS = 8
DEFAULT_EPS = 1e-3
DEFAULT_DELTA = 0.001


# -- views ----------------------------------------------------------------------

@dataclass
class Column:
    name: str
    kind: str  # "numeric" | "categorical" | "count" | "length" | "cross"
    transforms: list[tuple[str, object]] = field(default_factory=list)


@dataclass
class FeatureView:
    """Row-major feature matrix plus the pure transform chain that produced every column."""

    view_id: str
    columns: list[Column]
    matrix: np.ndarray
    record_ids: list[str] = field(default_factory=list)
    working_set: str = ""

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> np.ndarray:
        return self.matrix[:, self.names.index(name)]

    def apply(self, records: Sequence[Record]) -> np.ndarray:
        """Re-materialize the view on other records from the recorded transforms."""
        return np.column_stack([_apply_chain(c, records) for c in self.columns]) if self.columns else np.zeros((len(records), 0))

    def to_manifest(self, selected=(), interactions=(), embedding: "EmbeddingSpec | None" = None) -> dict:
        return {
            "view_id": self.view_id,
            "working_set": self.working_set,
            "columns": [{"name": c.name, "kind": c.kind, "transforms": [list(t) for t in c.transforms]} for c in self.columns],
            "selected": [{"name": n, "score": s} for n, s in selected],
            "interactions": [ic.to_dict() for ic in interactions],
            "embedding": None if embedding is None else embedding.to_dict(),
        }

    @classmethod
    def from_manifest(cls, doc: Mapping) -> "FeatureView":
        """Columns and transforms only; call ``apply`` to materialize on records."""
        cols = [Column(c["name"], c["kind"], [tuple(t) for t in c["transforms"]]) for c in doc["columns"]]
        return cls(doc["view_id"], cols, np.zeros((0, len(cols))), [], doc.get("working_set", ""))


def _apply_chain(col: Column, records: Sequence[Record]) -> np.ndarray:
    out = None
    for op, arg in col.transforms:
        if op == "field":
            raw = [r.values.get(arg) for r in records]
        elif op == "float":
            out = np.array([np.nan if v is None else float(v) for v in raw])
        elif op == "impute":
            out = np.where(np.isnan(out), float(arg), out)
        elif op == "ordinal":
            codes = {c: i for i, c in enumerate(arg)}
            out = np.array([codes.get(None if v is None else str(v), -1) for v in raw], dtype=float)
        elif op == "count":
            out = np.array([len(v or ()) for v in raw], dtype=float)
        elif op == "length":
            out = np.array([len(v or "") for v in raw], dtype=float)
        else:
            raise UserError(f"unknown transform {op!r}")
    return out


def build_view(records: Sequence[Record], fields: Mapping[str, str], view_id: str = "view", working_set: str = "") -> FeatureView:
    """Materialize ``fields`` ({name: kind}) where kind is a catalog field kind name."""
    cols = []
    for name, kind in fields.items():
        raw = [r.values.get(name) for r in records]
        if kind == "numeric":
            vals = [float(v) for v in raw if v is not None]
            med = float(np.median(vals)) if vals else 0.0
            cols.append(Column(name, "numeric", [("field", name), ("float", None), ("impute", med)]))
        elif kind == "categorical":
            cats = sorted({str(v) for v in raw if v is not None})
            cols.append(Column(name, "categorical", [("field", name), ("ordinal", cats)]))
        elif kind == "label-set":
            cols.append(Column(name, "count", [("field", name), ("count", None)]))
        elif kind == "text":
            cols.append(Column(name, "length", [("field", name), ("length", None)]))
        else:
            raise UserError(f"field {name!r} of kind {kind!r} cannot be a tabular feature")
    view = FeatureView(view_id, cols, np.zeros((len(records), 0)), [r.record_id for r in records], working_set)
    view.matrix = view.apply(records)
    return view


# -- information estimates ---------------------------------------------------------

def discretize(x, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-frequency codes; columns with at most ``bins`` distinct values keep one code per value."""
    x = np.asarray(x, float)
    uniq = np.unique(x)
    if len(uniq) <= bins:
        return np.searchsorted(uniq, x)
    edges = np.unique(np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, x, side="right")


def _joint(*cols) -> np.ndarray:
    if not cols:
        return np.zeros(0, dtype=int)
    stacked = np.column_stack(cols)
    return np.unique(stacked, axis=0, return_inverse=True)[1].reshape(-1)


def entropy(codes, miller_madow: bool = True) -> float:
    codes = np.asarray(codes)
    n = len(codes)
    if n == 0:
        return 0.0
    counts = np.bincount(codes)
    counts = counts[counts > 0]
    p = counts / n
    h = float(-np.sum(p * np.log(p)))
    if miller_madow:
        h += (len(counts) - 1) / (2.0 * n)
    return h


def cmi(x, y, s=None, miller_madow: bool = True) -> float:
    """Î(X; Y | S) in nats on already-discrete codes; ``x`` and ``s`` may be 2-D (joint)."""
    x = _as_cols(x)
    y = np.asarray(y)
    s = _as_cols(s) if s is not None else []
    mm = miller_madow
    if not s:
        return entropy(_joint(*x), mm) + entropy(y, mm) - entropy(_joint(*x, y), mm)
    return (entropy(_joint(*x, *s), mm) + entropy(_joint(y, *s), mm)
            - entropy(_joint(*x, y, *s), mm) - entropy(_joint(*s), mm))


def _as_cols(a) -> list[np.ndarray]:
    if a is None:
        return []
    if isinstance(a, (list, tuple)):
        return [np.asarray(c) for c in a]
    a = np.asarray(a)
    return [a] if a.ndim == 1 else [a[:, j] for j in range(a.shape[1])]


def _matrix(view) -> tuple[np.ndarray, list[str]]:
    if isinstance(view, FeatureView):
        return view.matrix, view.names
    X = np.asarray(view, float)
    return X, [f"x{j}" for j in range(X.shape[1])]


def select_features_cmi(
    view,
    target,
    k: int,
    bins: int = DEFAULT_BINS,
    eps: float = DEFAULT_EPS,
    miller_madow: bool = True,
    names: Sequence[str] | None = None,
) -> list[tuple[str, float]]:
    """Greedy forward selection by conditional mutual information.

    Each step takes the best single feature, unless some pair of unselected
    features carries more gain per feature jointly (this is what lets purely
    synergistic pairs such as XOR be found). Stops when the best gain per
    feature is at most ``eps``.

    Scores are per-feature shares of joint conditional gain. When a later
    pick gains more per feature than the block before it (three-way synergy),
    the two blocks are pooled and share their summed gain, so the reported
    sequence is non-increasing; by the chain rule the scores still sum to the
    joint information of the selected set.
    """
    X, default_names = _matrix(view)
    names = list(names or default_names)
    if k < 0 or k > X.shape[1]:
        raise UserError(f"k must lie in [0, {X.shape[1]}]")
    y = np.asarray(target)
    if len(np.unique(y)) < 2:
        raise UserError("degenerate-target: the target is constant")
    yb = discretize(y, bins)
    cols = [discretize(X[:, j], bins) for j in range(X.shape[1])]
    chosen: list[int] = []
    blocks: list[list] = []  # [members, summed gain]
    while len(chosen) < k:
        S = [cols[j] for j in chosen] or None
        rest = [j for j in range(len(cols)) if j not in chosen]
        gains = {j: cmi(cols[j], yb, S, miller_madow) for j in rest}
        best = max(rest, key=lambda j: (gains[j], -j))
        pick = [(best, gains[best])]
        if k - len(chosen) >= 2:
            pair_best = None
            for a, b in itertools.combinations(rest, 2):
                g = cmi([cols[a], cols[b]], yb, S, miller_madow) / 2.0
                if pair_best is None or g > pair_best[0]:
                    pair_best = (g, a, b)
            if pair_best is not None and pair_best[0] > gains[best]:
                g, a, b = pair_best
                first, second = sorted((a, b), key=lambda j: (-gains[j], j))
                pick = [(first, g), (second, g)]
        if pick[0][1] <= eps:
            break
        chosen.extend(j for j, _ in pick)
        blocks.append([[j for j, _ in pick], sum(g for _, g in pick)])
        while len(blocks) > 1 and blocks[-1][1] / len(blocks[-1][0]) > blocks[-2][1] / len(blocks[-2][0]):
            members, gain = blocks.pop()
            blocks[-1][0].extend(members)
            blocks[-1][1] += gain
    return [(names[j], float(gain / len(members))) for members, gain in blocks for j in members]


# -- interactions ---------------------------------------------------------------

@dataclass
class InteractionCandidate:
    i: str
    j: str
    association: float
    error_lift: float
    retained: bool = False
    utility: float = 0.0
    fold_metrics: list[tuple[float, float]] = field(default_factory=list)  # (without, with) per fold

    def to_dict(self) -> dict:
        return {"pair": [self.i, self.j], "association": self.association, "error_lift": self.error_lift,
                "retained": self.retained, "utility": self.utility, "fold_metrics": [list(f) for f in self.fold_metrics]}


def crossing(a, b, kind_a: str = "numeric", kind_b: str = "numeric") -> np.ndarray:
    """Concatenated codes for two categoricals, otherwise the product."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if kind_a == "categorical" and kind_b == "categorical":
        return a * (np.max(b) + 1 if len(b) else 1) + b
    return a * b


def _kinds(view, p: int) -> list[str]:
    if isinstance(view, FeatureView):
        return [c.kind for c in view.columns]
    return ["numeric"] * p


def nmi(a_codes, b_codes) -> float:
    ha, hb = entropy(a_codes, False), entropy(b_codes, False)
    if ha <= 0 or hb <= 0:
        return 0.0
    i = cmi(a_codes, b_codes, miller_madow=False)
    return float(min(1.0, max(0.0, i / np.sqrt(ha * hb))))


def _corr(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def _pair_stats(X, kinds, y_codes, resid, bins):
    out = []
    for a, b in itertools.combinations(range(X.shape[1]), 2):
        c = crossing(X[:, a], X[:, b], kinds[a], kinds[b])
        out.append((a, b, nmi(discretize(c, bins), y_codes), _corr(c, resid)))
    return out


def propose_interactions(view, target, baseline_pred, q: int = 10, bins: int = DEFAULT_BINS) -> list[InteractionCandidate]:
    X, names = _matrix(view)
    if q <= 0 or X.shape[1] < 2:
        return []
    y = np.asarray(target, float)
    resid = y - np.asarray(baseline_pred, float)
    stats = _pair_stats(X, _kinds(view, X.shape[1]), discretize(y, bins), resid, bins)
    stats.sort(key=lambda t: (-max(t[2], abs(t[3])), t[0], t[1]))
    return [InteractionCandidate(names[a], names[b], assoc, lift, utility=max(assoc, abs(lift)))
            for a, b, assoc, lift in stats[:q]]


def association_noise_floor(view, target, n_perm: int = 20, quantile: float = 0.99, bins: int = DEFAULT_BINS, seed: int = 0) -> float:
    """Quantile of the largest pairwise association over target permutations."""
    X, _ = _matrix(view)
    kinds = _kinds(view, X.shape[1])
    rng = np.random.default_rng(seed)
    y = np.asarray(target, float)
    crosses = [discretize(crossing(X[:, a], X[:, b], kinds[a], kinds[b]), bins)
               for a, b in itertools.combinations(range(X.shape[1]), 2)]
    maxima = []
    for _ in range(n_perm):
        yp = discretize(rng.permutation(y), bins)
        maxima.append(max(nmi(c, yp) for c in crosses))
    return float(np.quantile(maxima, quantile))


def kfold(n: int, folds: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    if folds < 2:
        raise UserError("at least 2 folds are required")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    return [(np.sort(np.concatenate(parts[:f] + parts[f + 1 :])), np.sort(parts[f])) for f in range(folds)]


def _default_evaluator(metric: str):
    def run(Xtr, ytr, Xte, yte):
        model = baseline_for(ytr).fit(Xtr, ytr)
        return evaluate(metric, yte, model.predict(Xte))

    return run


def retain_interactions(
    candidates: Sequence[InteractionCandidate],
    view,
    target,
    metric: str = "accuracy",
    folds: int = 2,
    delta: float = DEFAULT_DELTA,
    seed: int = 0,
    evaluator: Callable | None = None,
) -> list[InteractionCandidate]:
    """Keep a crossing only if it improves ``metric`` by ≥ ``delta`` (relative) on every fold."""
    if not candidates:
        return []
    X, names = _matrix(view)
    kinds = _kinds(view, X.shape[1])
    y = np.asarray(target, float)
    run = evaluator or _default_evaluator(metric)
    splits = kfold(len(y), folds, seed)
    base = [run(X[tr], y[tr], X[te], y[te]) for tr, te in splits]
    kept = []
    for cand in candidates:
        a, b = names.index(cand.i), names.index(cand.j)
        Xc = np.column_stack([X, crossing(X[:, a], X[:, b], kinds[a], kinds[b])])
        with_c = [run(Xc[tr], y[tr], Xc[te], y[te]) for tr, te in splits]
        cand.fold_metrics = list(zip(base, with_c))
        gains = [improvement(metric, m0, m1) for m0, m1 in cand.fold_metrics]
        cand.utility = float(min(gains))
        cand.retained = all(g >= delta for g in gains)
        if cand.retained:
            kept.append(cand)
    return kept


# -- embeddings -----------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingSpec:
    dim: int = 64
    encoder: str = "hash"
    join_key: str | None = None
    time_window: int | None = None  # milliseconds
    tau: float = 1.0
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise UserError("embedding dimension must be >= 1")
        if not self.tau > 0:
            raise UserError("tau must be > 0")
        object.__setattr__(self, "exclude", tuple(self.exclude))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "encoder": self.encoder, "join_key": self.join_key, "time_window": self.time_window,
                "tau": self.tau, "exclude": list(self.exclude)}


_TOKEN = re.compile(r"\w+")


def _bucket(token: str, dim: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "big")
    return h % dim, 1.0 if (h >> 63) & 1 else -1.0


def hash_encode(record: Record, dim: int, exclude: Sequence[str] = ()) -> np.ndarray:
    """Signed feature hashing of field values (numbers by magnitude, strings by token), L2-normalized."""
    v = np.zeros(dim)

    def put(tok, weight=1.0):
        i, sgn = _bucket(tok, dim)
        v[i] += sgn * weight

    put("__bias__")
    for name in sorted(record.values):
        if name in exclude:
            continue
        val = record.values[name]
        if val is None:
            put(f"{name}=<null>")
        elif isinstance(val, bool):
            put(f"{name}={val}")
        elif isinstance(val, (int, float)):
            put(name, float(val))
        elif isinstance(val, str):
            for tok in _TOKEN.findall(val.lower()):
                put(f"{name}:{tok}")
        elif isinstance(val, (list, tuple)):
            if val and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
                for j, x in enumerate(val):
                    put(f"{name}[{j}]", float(x))
            else:
                for x in val:
                    put(f"{name}={x}")
        else:
            put(f"{name}={json.dumps(val, sort_keys=True, default=str)}")
    n = np.linalg.norm(v)
    if n == 0:  # every token cancelled under signed hashing
        i, sgn = _bucket("__bias__", dim)
        v[i] = sgn
        return v
    return v / n


ENCODERS: dict[str, Callable[[Record, int, Sequence[str]], np.ndarray]] = {"hash": hash_encode}


def neighbors(records: Sequence[Record], spec: EmbeddingSpec) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in records]
    if spec.join_key is not None:
        groups: dict[str, list[int]] = {}
        for i, r in enumerate(records):
            key = r.values.get(spec.join_key)
            if key is not None:
                groups.setdefault(str(key), []).append(i)
        for members in groups.values():
            for i in members:
                out[i] = [j for j in members if j != i]
    elif spec.time_window is not None:
        order = sorted((r.timestamp, i) for i, r in enumerate(records) if r.timestamp is not None)
        ts = [t for t, _ in order]
        for pos, (t, i) in enumerate(order):
            lo = np.searchsorted(ts, t - spec.time_window, side="left")
            hi = np.searchsorted(ts, t + spec.time_window, side="right")
            out[i] = sorted(order[p][1] for p in range(lo, hi) if p != pos)
    return out


def embed(
    records: Sequence[Record],
    spec: EmbeddingSpec,
    relevance: Callable[[Record, Record, np.ndarray, np.ndarray], float] | None = None,
) -> np.ndarray:
    """out = normalize(attr + Σ softmax_τ(rel(n)) · attr(n)) over each record's neighbours.

    ``relevance(anchor, neighbour, attr_anchor, attr_neighbour)`` scores a
    neighbour; the default is the cosine between the two attribute vectors.
    """
    try:
        enc = ENCODERS[spec.encoder]
    except KeyError:
        raise UserError(f"unknown attribute encoder {spec.encoder!r}") from None
    attr = np.array([enc(r, spec.dim, spec.exclude) for r in records]).reshape(len(records), spec.dim)
    out = attr.copy()
    for i, nbrs in enumerate(neighbors(records, spec)):
        if not nbrs:
            continue
        if relevance is None:
            rel = attr[nbrs] @ attr[i]
        else:
            rel = np.array([relevance(records[i], records[j], attr[i], attr[j]) for j in nbrs])
        z = (rel - rel.max()) / spec.tau
        w = np.exp(z)
        w /= w.sum()
        mixed = attr[i] + w @ attr[nbrs]
        out[i] = mixed if np.linalg.norm(mixed) > 1e-9 else attr[i]
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / norms

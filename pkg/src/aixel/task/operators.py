"""Operator registry, built-in operators, telemetry and binding."""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from ..errors import PlanningError, UserError
from .request import Constraint, TaskSpec

FAMILIES = ("Data", "Model", "LLM")
TYPES = ("table", "predictions", "answers", "verdicts")

OpFn = Callable[[list, dict, "ExecContext"], Any]


@dataclass(frozen=True)
class OperatorSpec:
    op_id: str
    family: str
    steps: frozenset[str]  # plan step kinds this operator implements
    inputs: tuple[str, ...]
    output: str
    fn: OpFn = field(compare=False, repr=False)
    selectivity: float = 1.0
    per_row_ms: float = 0.001
    fixed_ms: float = 0.1
    memory_mb: float = 1.0
    cacheable: bool = True
    deterministic: bool = True
    batch_sizes: tuple[int, ...] = (1,)
    version: str = "1"
    accuracy: float = 1.0
    needs_index: bool = False
    fusable: bool = False  # row-wise Data operator that chain merge may fuse
    row_fn: Callable[[dict, dict], dict | None] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UserError(f"operator {self.op_id}: family must be one of {FAMILIES}")
        unknown = [t for t in (*self.inputs, self.output) if t not in TYPES]
        if unknown or not self.output:
            raise UserError(f"operator {self.op_id}: capability signature has unknown types {unknown}")
        if min(self.per_row_ms, self.fixed_ms, self.memory_mb) <= 0 or not 0 < self.selectivity <= 1:
            raise UserError(f"operator {self.op_id}: profiles must be positive")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise UserError(f"operator {self.op_id}: batch sizes must be positive")

    @property
    def signature(self) -> tuple[tuple[str, ...], str]:
        return self.inputs, self.output

    def estimate_ms(self, rows: float) -> float:
        return self.fixed_ms + self.per_row_ms * rows


@dataclass
class ExecContext:
    """Everything an operator may read while running."""

    catalog: Any = None
    gateway: Any = None
    indexes: dict = field(default_factory=dict)  # (dataset, field) -> AttributeIndex | DatasetIndex
    batcher: Any = None
    seed: int = 0


class Registry:
    def __init__(self, ops: Iterable[OperatorSpec] = ()):
        self._ops: dict[str, OperatorSpec] = {}
        for op in ops:
            self.register(op)

    def register(self, op: OperatorSpec) -> None:
        if op.op_id in self._ops:
            raise UserError(f"operator {op.op_id!r} already registered")
        self._ops[op.op_id] = op

    def get(self, op_id: str) -> OperatorSpec:
        try:
            return self._ops[op_id]
        except KeyError:
            raise UserError(f"unknown operator {op_id!r}") from None

    def without(self, pred: Callable[[OperatorSpec], bool]) -> "Registry":
        return Registry(op for op in self._ops.values() if not pred(op))

    def candidates(self, step: str, inputs: tuple[str, ...], output: str, family: str | None = None) -> list[OperatorSpec]:
        return sorted((op for op in self._ops.values()
                       if step in op.steps and op.inputs == inputs and op.output == output
                       and (family is None or op.family == family)), key=lambda o: o.op_id)

    def __iter__(self):
        return iter(sorted(self._ops.values(), key=lambda o: o.op_id))

    def __len__(self) -> int:
        return len(self._ops)


# -- attribute index used by the index-lookup filter -------------------------------

class AttributeIndex:
    """Sorted (value, record id) pairs for one numeric field."""

    def __init__(self, pairs: Iterable[tuple[float, str]]):
        pairs = sorted(pairs)
        self.values = [v for v, _ in pairs]
        self.ids = [i for _, i in pairs]

    @classmethod
    def build(cls, catalog, dataset: str, fld: str) -> "AttributeIndex":
        return cls((float(r.values[fld]), r.record_id) for r in catalog.records(dataset)
                   if isinstance(r.values.get(fld), (int, float)))

    def ids_in(self, c: Constraint) -> set[str]:
        lo = bisect.bisect_right(self.values, c.lo) if c.lo_open else bisect.bisect_left(self.values, c.lo)
        hi = bisect.bisect_left(self.values, c.hi) if c.hi_open else bisect.bisect_right(self.values, c.hi)
        return set(self.ids[lo:hi])


def constraints_of(params: Mapping) -> list[Constraint]:
    out = []
    for d in params.get("constraints", []):
        if isinstance(d, Constraint):
            out.append(d)
            continue
        d = dict(d)
        d["lo"] = -math.inf if d.get("lo") is None else d["lo"]
        d["hi"] = math.inf if d.get("hi") is None else d["hi"]
        out.append(Constraint(**d))
    return out


def _match(row: dict, cs: Sequence[Constraint]) -> bool:
    return all(c.test(row.get(c.field)) for c in cs)


# -- Data operators -----------------------------------------------------------------

def _scan(inputs, params, ctx):
    if "rows" in params:
        return [dict(r) for r in params["rows"]]
    return [{"_id": r.record_id, **r.values} for r in ctx.catalog.records(params["dataset"], params.get("tenant"))]


def _filter_row(row, params):
    return row if _match(row, constraints_of(params)) else None


def _filter_scan(inputs, params, ctx):
    cs = constraints_of(params)
    return [r for r in inputs[0] if _match(r, cs)]


def _filter_index(inputs, params, ctx):
    cs = constraints_of(params)
    ds = params.get("dataset")
    keep: set[str] | None = None
    rest = []
    for c in cs:
        idx = ctx.indexes.get((ds, c.field))
        if c.kind == "range" and isinstance(idx, AttributeIndex):
            hits = idx.ids_in(c)
            keep = hits if keep is None else keep & hits
            if c.exclude:
                rest.append(Constraint(c.field, "range", exclude=list(c.exclude)))
        else:
            rest.append(c)
    rows = inputs[0] if keep is None else [r for r in inputs[0] if r.get("_id") in keep]
    return [r for r in rows if _match(r, rest)]


def _project_row(row, params):
    keep = params["fields"]
    return {k: row[k] for k in keep if k in row}


def _map_row(row, params):
    f = params["field"]
    out = dict(row)
    v = row.get(f)
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        out[params.get("as", f)] = v * params.get("scale", 1.0) + params.get("offset", 0.0)
    return out


def _rowwise(row_fn):
    def run(inputs, params, ctx):
        out = []
        for r in inputs[0]:
            o = row_fn(r, params)
            if o is not None:
                out.append(o)
        return out
    return run


def _sort(inputs, params, ctx):
    f = params["field"]
    rows = list(inputs[0])
    present = [r for r in rows if isinstance(r.get(f), (int, float, str))]
    missing = [r for r in rows if not isinstance(r.get(f), (int, float, str))]
    present.sort(key=lambda r: (str(type(r[f])), r[f]), reverse=bool(params.get("descending")))
    return present + missing


def _limit(inputs, params, ctx):
    return list(inputs[0][: int(params["n"])])


def _join(inputs, params, ctx):
    key = params.get("key", "_id")
    right: dict[Any, list[dict]] = {}
    for r in inputs[1]:
        right.setdefault(r.get(key), []).append(r)
    out = []
    for l in inputs[0]:
        for r in right.get(l.get(key), []):
            row = dict(l)
            row.update({f"r.{k}": v for k, v in r.items() if k != key})
            out.append(row)
    return out


def _unit(v):
    v = np.asarray(v, float)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _retrieve_scan(inputs, params, ctx):
    q = _unit(params["query"])
    vf, k = params["vector_field"], int(params.get("k", 10))
    scored = []
    for r in inputs[0]:
        v = r.get(vf)
        if v is not None and len(v) == len(q):
            scored.append((-float(_unit(v) @ q), str(r.get("_id")), r))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [{**r, "_score": -s} for s, _, r in scored[:k]]


# -- Model operators ----------------------------------------------------------------

def _segment(rid: str, seed: int) -> str:
    h = int.from_bytes(hashlib.blake2b(f"{seed}:{rid}".encode(), digest_size=8).digest(), "big")
    return "val" if h % 5 == 0 else "train"


def _model_fn(kind: str):
    def run(inputs, params, ctx):
        from .. import learners, metrics

        rows = inputs[0]
        target, feats = params["target"], list(params.get("features") or [])
        if not feats:
            feats = sorted(k for k, v in (rows[0].items() if rows else ())
                           if k not in (target, "_id") and isinstance(v, (int, float)) and not isinstance(v, bool))
        usable = [r for r in rows if isinstance(r.get(target), (int, float)) and all(isinstance(r.get(f), (int, float)) for f in feats)]
        if len(usable) < 4 or not feats:
            raise UserError(f"model step needs at least 4 complete numeric rows, got {len(usable)}")
        X = np.array([[float(r[f]) for f in feats] for r in usable])
        y = np.array([float(r[target]) for r in usable])
        seg = np.array([_segment(str(r.get("_id")), ctx.seed) for r in usable])
        tr, va = seg == "train", seg == "val"
        if not va.any() or not tr.any():
            tr = va = np.ones(len(y), bool)
        binary = set(np.unique(y)) <= {0.0, 1.0}
        if kind == "stumps":
            model = learners.StumpBoost(task="binary" if binary else "regression")
        else:
            model = learners.LEARNERS[kind]()
        model.fit(X[tr], y[tr])
        p = model.predict(X)
        name = params.get("metric") or ("auc" if binary and len(set(y[va])) > 1 else "mse")
        return {"ids": [r.get("_id") for r in usable], "scores": [float(x) for x in p], "features": feats,
                "metric": name, "val_metric": float(metrics.evaluate(name, y[va], p[va])), "model": model.params()}
    return run


# -- LLM operators ------------------------------------------------------------------

def _queries(rows, params) -> list[str]:
    q = params.get("question", "")
    f = params.get("field")
    if f is None:
        return [q]
    return [f"{q} | {r.get(f)}" if q else str(r.get(f)) for r in rows]


def _llm_answer(inputs, params, ctx):
    from .batching import LLMCall, answer_calls

    rows = inputs[0] if inputs else [{}]
    qs = _queries(rows, params) if inputs else [params.get("question", "")]
    tid = params.get("template_id", "answer")
    calls = [LLMCall(f"c{i}", tid, q) for i, q in enumerate(qs)]
    return answer_calls(calls, ctx.gateway, ctx.batcher, params.get("batch_size"))


def _llm_verify(inputs, params, ctx):
    out = []
    for a in inputs[0]:
        v = ctx.gateway.complete_prompt(f"VERIFY: {a}", {"verdict": "str", "reason": "str"})
        out.append(v["verdict"])
    return out


def builtin_operators() -> list[OperatorSpec]:
    fs = lambda *s: frozenset(s)  # noqa: E731
    return [
        OperatorSpec("data.scan", "Data", fs("source"), (), "table", _scan, per_row_ms=0.002, fixed_ms=0.5),
        OperatorSpec("data.filter.scan", "Data", fs("filter"), ("table",), "table", _rowwise(_filter_row),
                     selectivity=0.5, per_row_ms=0.004, fixed_ms=0.05, fusable=True, row_fn=_filter_row),
        OperatorSpec("data.filter.index", "Data", fs("filter"), ("table",), "table", _filter_index,
                     selectivity=0.5, per_row_ms=0.001, fixed_ms=0.2, needs_index=True),
        OperatorSpec("data.project", "Data", fs("project"), ("table",), "table", _rowwise(_project_row),
                     per_row_ms=0.002, fixed_ms=0.05, fusable=True, row_fn=_project_row),
        OperatorSpec("data.map", "Data", fs("map"), ("table",), "table", _rowwise(_map_row),
                     per_row_ms=0.002, fixed_ms=0.05, fusable=True, row_fn=_map_row),
        OperatorSpec("data.sort", "Data", fs("sort"), ("table",), "table", _sort, per_row_ms=0.01, fixed_ms=0.05),
        OperatorSpec("data.limit", "Data", fs("limit"), ("table",), "table", _limit, per_row_ms=0.0005, fixed_ms=0.01),
        OperatorSpec("data.join", "Data", fs("join"), ("table", "table"), "table", _join, per_row_ms=0.01, fixed_ms=0.1),
        OperatorSpec("data.retrieve.scan", "Data", fs("retrieve"), ("table",), "table", _retrieve_scan,
                     per_row_ms=0.01, fixed_ms=0.1, accuracy=1.0),
        OperatorSpec("model.logistic", "Model", fs("classify"), ("table",), "predictions", _model_fn("logistic"),
                     per_row_ms=0.05, fixed_ms=5.0, accuracy=0.8),
        OperatorSpec("model.stumps", "Model", fs("classify", "regress"), ("table",), "predictions", _model_fn("stumps"),
                     per_row_ms=0.5, fixed_ms=5.0, accuracy=0.85),
        OperatorSpec("model.ridge", "Model", fs("regress"), ("table",), "predictions", _model_fn("ridge"),
                     per_row_ms=0.02, fixed_ms=2.0, accuracy=0.75),
        OperatorSpec("llm.answer", "LLM", fs("llm"), ("table",), "answers", _llm_answer,
                     per_row_ms=5.0, fixed_ms=50.0, batch_sizes=(1, 4, 8, 16, 32), accuracy=0.7),
        OperatorSpec("llm.answer.direct", "LLM", fs("llm"), (), "answers", _llm_answer,
                     per_row_ms=5.0, fixed_ms=50.0, accuracy=0.7),
        OperatorSpec("llm.verify", "LLM", fs("verify"), ("answers",), "verdicts", _llm_verify,
                     per_row_ms=5.0, fixed_ms=50.0, accuracy=0.7),
    ]


def default_registry() -> Registry:
    return Registry(builtin_operators())


# -- telemetry ----------------------------------------------------------------------

HALF_LIFE_RUNS = 50
_DECAY = 0.5 ** (1 / HALF_LIFE_RUNS)


@dataclass
class OpStats:
    weight: float = 0.0
    ok: float = 0.0
    wall_ms: float = 0.0
    runs: int = 0

    def add(self, ok: bool, wall_ms: float) -> None:
        self.weight = self.weight * _DECAY + 1.0
        self.ok = self.ok * _DECAY + float(ok)
        self.wall_ms = self.wall_ms * _DECAY + wall_ms
        self.runs += 1

    @property
    def success(self) -> float:
        return self.ok / self.weight if self.weight else 0.5

    @property
    def mean_ms(self) -> float | None:
        return self.wall_ms / self.weight if self.weight else None


class Telemetry:
    """Exponentially aged per-operator history, optionally persisted as one JSONL file per operator."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._stats: dict[str, OpStats] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        if self.root is not None and self.root.exists():
            for p in sorted(self.root.glob("*.jsonl")):
                for line in p.read_text().splitlines():
                    if line.strip():
                        e = json.loads(line)
                        self._stats.setdefault(e["op"], OpStats()).add(e["ok"], e["wall_ms"])

    def _lock(self, op_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(op_id, threading.Lock())

    def record(self, op_id: str, ok: bool, wall_ms: float, rows: int = 0, cache_hit: bool = False, **extra) -> None:
        with self._lock(op_id):
            self._stats.setdefault(op_id, OpStats()).add(ok, wall_ms)
            if self.root is not None:
                self.root.mkdir(parents=True, exist_ok=True)
                entry = {"op": op_id, "ok": ok, "wall_ms": wall_ms, "rows": rows, "cache_hit": cache_hit, **extra}
                with open(self.root / f"{op_id}.jsonl", "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def stats(self, op_id: str) -> OpStats:
        return self._stats.get(op_id, OpStats())


# -- binding ------------------------------------------------------------------------

DEFAULT_WEIGHTS = {"accuracy": 0.4, "runtime": 0.3, "index": 0.1, "batching": 0.1, "cache": 0.05, "telemetry": 0.05}


@dataclass
class Binding:
    step: str
    op: OperatorSpec
    fallback: OperatorSpec | None
    params: dict
    scores: dict[str, dict[str, float]]  # op_id -> component scores plus "total"

    def to_dict(self) -> dict:
        return {"step": self.step, "op": self.op.op_id, "fallback": self.fallback.op_id if self.fallback else None,
                "params": _jsonable(self.params), "scores": self.scores}


def _jsonable(x):
    return json.loads(json.dumps(x, default=lambda o: o.to_dict() if hasattr(o, "to_dict") else list(o)))


def index_available(op: OperatorSpec, params: Mapping, indexes: Mapping) -> bool:
    if not op.needs_index:
        return False
    ds = params.get("dataset")
    fields = [c.field for c in constraints_of(params) if c.kind == "range"]
    return bool(fields) and any((ds, f) in indexes for f in fields)


def score_candidates(cands: Sequence[OperatorSpec], rows: float, params: Mapping, indexes: Mapping,
                     telemetry: Telemetry | None, weights: Mapping[str, float] = DEFAULT_WEIGHTS) -> dict[str, dict[str, float]]:
    """Weighted component scores per candidate; index-requiring variants without an index are excluded."""
    usable = [c for c in cands if not c.needs_index or index_available(c, params, indexes)]
    est = {}
    for c in usable:
        hist = telemetry.stats(c.op_id).mean_ms if telemetry else None
        est[c.op_id] = hist if hist else c.estimate_ms(rows)
    best = min(est.values()) if est else 1.0
    out = {}
    for c in usable:
        comp = {
            "accuracy": c.accuracy,
            "runtime": best / est[c.op_id] if est[c.op_id] > 0 else 1.0,
            "index": 1.0 if c.needs_index else 0.0,
            "batching": 1.0 if max(c.batch_sizes) > 1 else 0.0,
            "cache": 1.0 if c.cacheable and c.deterministic else 0.0,
            "telemetry": telemetry.stats(c.op_id).success if telemetry else 0.5,
        }
        comp["total"] = sum(weights[k] * comp[k] for k in DEFAULT_WEIGHTS)
        out[c.op_id] = comp
    return out


def step_params(spec: TaskSpec, step: str) -> dict:
    p: dict[str, Any] = {}
    if spec.dataset:
        p["dataset"] = spec.dataset
    if step == "filter":
        p["constraints"] = [c.to_dict() for c in spec.constraints]
    elif step == "project":
        fields = spec.preferences.get("features")
        if fields:
            p["fields"] = sorted(set(fields) | {spec.target, "_id"})
        else:
            p["fields"] = None  # resolved against the catalog schema in bind()
    elif step in ("classify", "regress"):
        p.update(target=spec.target, features=spec.preferences.get("features"), metric=spec.preferences.get("metric"))
    elif step == "retrieve":
        p.update(query=spec.preferences.get("query_vector"), k=int(spec.preferences.get("k", 10)))
    elif step == "llm":
        p.update(question=spec.target, template_id=spec.preferences.get("template_id", "answer"))
        if spec.dataset:
            p["field"] = spec.preferences.get("context_field")
    return p


def bind(spec: TaskSpec, registry: Registry, catalog=None, telemetry: Telemetry | None = None,
         indexes: Mapping | None = None, weights: Mapping[str, float] | None = None) -> list[Binding]:
    weights = dict(DEFAULT_WEIGHTS, **(weights or {}))
    indexes = indexes or {}
    rows = float(catalog.dataset(spec.dataset).live_count) if catalog is not None and spec.dataset else 1000.0
    desc = catalog.descriptor(spec.dataset) if catalog is not None and spec.dataset else None
    out = []
    for st in spec.steps:
        kind = spec.objective if st.name == "model" else st.name
        params = step_params(spec, kind)
        if kind == "project" and params["fields"] is None and desc is not None:
            params["fields"] = ["_id"] + [f.name for f in desc.schema if f.kind.value in ("numeric", "categorical")]
        if kind == "retrieve" and desc is not None:
            params["vector_field"] = desc.vector_field.name
            if params["query"] is None:
                from ..catalog import Record
                from ..features import hash_encode
                params["query"] = hash_encode(Record("q", {"text": spec.target}), desc.vector_field.dim).tolist()
        if kind == "llm" and desc is not None and not params.get("field"):
            text = [f.name for f in desc.schema if f.kind.value == "text"]
            params["field"] = text[0] if text else desc.schema[0].name
        cands = registry.candidates(kind, st.inputs, st.output, st.family)
        scores = score_candidates(cands, rows, params, indexes, telemetry, weights)
        if not scores:
            raise PlanningError(f"unbindable step {st.name!r}: no {st.family} operator implements "
                                f"{kind} with signature {st.inputs} -> {st.output}")
        ranked = sorted(scores, key=lambda o: (-round(scores[o]["total"], 12), o))
        primary = registry.get(ranked[0])
        fallback = next((registry.get(o) for o in ranked[1:] if registry.get(o).signature == primary.signature), None)
        out.append(Binding(st.name, primary, fallback, params, scores))
    return out

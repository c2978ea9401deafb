"""Declarative requests: grounding against the catalog and canonical constraints."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..catalog import Catalog, DatasetDescriptor, FieldKind
from ..errors import UserError
from ..gateway import Gateway, SchemaInvalid

OBJECTIVES = ("classify", "regress", "search", "answer")
_MULT = {"": 1.0, "k": 1e3, "K": 1e3, "M": 1e6, "ms": 1.0, "s": 1e3, "min": 6e4, "h": 3.6e6}
_NUM = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*(k|K|M|ms|s|min|h)?\s*$")
_PRED = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(<=|>=|==|!=|<|>|≤|≥|=|\bin\b|\bhas_all\b|\bhas\b)\s*(.+?)\s*$")
_OP_ALIASES = {"≤": "<=", "≥": ">=", "=": "=="}
NUMERIC_OPS = ("<", "<=", ">", ">=", "==", "!=")


def normalize_value(v: Any) -> Any:
    """``"10k"`` -> 10000.0, ``"2s"`` -> 2000.0 (milliseconds); other values pass through."""
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        m = _NUM.match(v)
        if m:
            return float(m.group(1)) * _MULT[m.group(2) or ""]
        return v.strip()
    if isinstance(v, (list, tuple)):
        return [normalize_value(x) for x in v]
    return v


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: Any

    @classmethod
    def parse(cls, p) -> "Predicate":
        if isinstance(p, Predicate):
            return p
        if isinstance(p, Mapping):
            try:
                return cls(str(p["field"]), _OP_ALIASES.get(p["op"], p["op"]), p["value"])
            except KeyError as e:
                raise UserError(f"filter {dict(p)} is missing {e.args[0]!r}") from None
        if isinstance(p, str):
            m = _PRED.match(p)
            if not m:
                raise UserError(f"cannot parse filter {p!r}; expected '<field> <op> <value>'")
            op = _OP_ALIASES.get(m.group(2), m.group(2))
            raw = m.group(3)
            if op in ("in", "has", "has_all"):
                value: Any = [x.strip() for x in raw.strip("[]()").split(",") if x.strip()]
            else:
                value = raw.strip("'\"")
            return cls(m.group(1), op, value)
        raise UserError(f"unsupported filter {p!r}")

    def __str__(self) -> str:
        v = self.value if not isinstance(self.value, list) else "[" + ", ".join(map(str, self.value)) + "]"
        return f"{self.field} {self.op} {v}"


@dataclass
class Constraint:
    """Canonical per-field constraint; ``sources`` names the predicates it came from."""

    field: str
    kind: str  # range | set | labels
    lo: float = -math.inf
    hi: float = math.inf
    lo_open: bool = False
    hi_open: bool = False
    exclude: list = field(default_factory=list)
    values: list | None = None  # allowed values (set) or required labels (labels)
    mode: str = "any"
    sources: list[str] = field(default_factory=list)

    def test(self, v: Any) -> bool:
        if v is None:
            return False
        if self.kind == "range":
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                return False
            if v < self.lo or (self.lo_open and v == self.lo) or v > self.hi or (self.hi_open and v == self.hi):
                return False
            return v not in self.exclude
        if self.kind == "set":
            return (self.values is None or v in self.values) and v not in self.exclude
        have = set(v if isinstance(v, (list, tuple, set)) else [v])
        want = set(self.values or [])
        return want <= have if self.mode == "all" else bool(want & have)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lo", "hi"):
            if math.isinf(d[k]):
                d[k] = None
        return d


@dataclass(frozen=True)
class Step:
    name: str
    family: str  # Data | Model | LLM
    inputs: tuple[str, ...]
    output: str
    control: str = "sequential"


@dataclass
class DeclarativeRequest:
    objective: str | None = None
    target: str | None = None
    dataset: str | None = None
    filters: list = field(default_factory=list)
    preferences: dict = field(default_factory=dict)
    budgets: dict = field(default_factory=dict)
    nl: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeclarativeRequest":
        unknown = set(d) - {"objective", "target", "dataset", "filters", "preferences", "budgets", "nl"}
        if unknown:
            raise UserError(f"unknown request keys {sorted(unknown)}")
        return cls(**{k: d[k] for k in d})

    @classmethod
    def load(cls, path: str | Path) -> "DeclarativeRequest":
        p = Path(path)
        if not p.exists():
            raise UserError(f"request file not found: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise UserError(f"request file {p} is not valid JSON: {e}") from None


@dataclass
class TaskSpec:
    objective: str
    dataset: str | None
    target: str
    target_kind: str | None
    constraints: list[Constraint]
    expected_outputs: list[str]
    steps: list[Step]
    preferences: dict
    budgets: dict

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "dataset": self.dataset,
            "target": self.target,
            "target_kind": self.target_kind,
            "constraints": [c.to_dict() for c in self.constraints],
            "expected_outputs": self.expected_outputs,
            "steps": [asdict(s) for s in self.steps],
            "preferences": self.preferences,
            "budgets": self.budgets,
        }

    def predicate(self):
        cs = list(self.constraints)
        return lambda row: all(c.test(row.get(c.field)) for c in cs)


def _ground_dataset(req: DeclarativeRequest, catalog: Catalog) -> DatasetDescriptor | None:
    if req.dataset is not None:
        if req.dataset not in catalog:
            raise UserError(f"unknown dataset {req.dataset!r}")
        return catalog.descriptor(req.dataset)
    if req.objective in ("classify", "regress"):
        hits = [d for d in catalog.datasets() if catalog.descriptor(d).has_field(req.target)]
        if len(hits) == 1:
            return catalog.descriptor(hits[0])
        if len(hits) > 1:
            raise UserError(f"target {req.target!r} exists in several datasets {hits}; set 'dataset'")
        raise UserError(f"unknown target field {req.target!r}")
    return None


def canonicalize(preds: Iterable[Predicate], desc: DatasetDescriptor) -> list[Constraint]:
    """Merge predicates per field into canonical constraints, naming any contradictory pair."""
    by_field: dict[str, Constraint] = {}
    narrowed_by: dict[str, dict[str, str]] = {}
    for p in preds:
        if not desc.has_field(p.field):
            raise UserError(f"filter '{p}': unknown field {p.field!r} in dataset {desc.dataset_id!r}")
        kind = desc.field(p.field).kind
        v = normalize_value(p.value)
        src = str(p)
        who = narrowed_by.setdefault(p.field, {})
        if kind is FieldKind.NUMERIC:
            if p.op not in NUMERIC_OPS + ("in",):
                raise UserError(f"filter '{p}': operator {p.op} does not apply to numeric field {p.field!r}")
            vals = v if isinstance(v, list) else [v]
            if not all(isinstance(x, float) for x in vals):
                raise UserError(f"filter '{p}': {p.value!r} is not a number")
            c = by_field.setdefault(p.field, Constraint(p.field, "range"))
            c.sources.append(src)
            if p.op in (">", ">="):
                if v > c.lo or (v == c.lo and p.op == ">"):
                    c.lo, c.lo_open, who["lo"] = v, p.op == ">", src
            elif p.op in ("<", "<="):
                if v < c.hi or (v == c.hi and p.op == "<"):
                    c.hi, c.hi_open, who["hi"] = v, p.op == "<", src
            elif p.op == "==":
                if v > c.lo or c.lo_open:
                    c.lo, c.lo_open, who["lo"] = v, False, src
                if v < c.hi or c.hi_open:
                    c.hi, c.hi_open, who["hi"] = v, False, src
                if not (c.lo <= v <= c.hi):
                    other = who.get("hi") if v > c.hi else who.get("lo")
                    raise UserError(f"conflicting filters: '{other}' and '{src}'")
            elif p.op == "!=":
                c.exclude.append(v)
                who["ex"] = src
            else:
                lo, hi = min(vals), max(vals)
                if lo > c.lo:
                    c.lo, c.lo_open, who["lo"] = lo, False, src
                if hi < c.hi:
                    c.hi, c.hi_open, who["hi"] = hi, False, src
            empty = c.lo > c.hi or (c.lo == c.hi and (c.lo_open or c.hi_open)) or (c.lo == c.hi and c.lo in c.exclude)
            if empty:
                pair = sorted({who.get("lo", src), who.get("hi", src), who.get("ex", src)} - {None}) if c.lo == c.hi else [who.get("lo", src), who.get("hi", src)]
                a, b = (pair + pair)[:2] if len(pair) == 1 else (pair[0], pair[-1])
                raise UserError(f"conflicting filters: '{a}' and '{b}'")
        elif kind in (FieldKind.CATEGORICAL, FieldKind.TEXT):
            if p.op not in ("==", "!=", "in"):
                raise UserError(f"filter '{p}': operator {p.op} does not apply to {kind.value} field {p.field!r}")
            c = by_field.setdefault(p.field, Constraint(p.field, "set"))
            c.sources.append(src)
            raw = p.value if isinstance(p.value, list) else [p.value]
            if p.op == "!=":
                c.exclude.extend(raw)
            else:
                allowed = set(raw) if c.values is None else set(c.values) & set(raw)
                prior = who.get("set")
                c.values = sorted(allowed, key=str)
                who["set"] = src
                if not allowed:
                    raise UserError(f"conflicting filters: '{prior}' and '{src}'")
            if c.values is not None and not set(c.values) - set(c.exclude):
                raise UserError(f"conflicting filters: '{who.get('set')}' and '{src}'")
        elif kind is FieldKind.LABEL_SET:
            if p.op not in ("has", "has_all", "=="):
                raise UserError(f"filter '{p}': use has/has_all on label-set field {p.field!r}")
            raw = p.value if isinstance(p.value, list) else [p.value]
            mode = "all" if p.op == "has_all" else "any"
            if p.field in by_field and by_field[p.field].mode != mode:
                raise UserError(f"filters on {p.field!r} mix has and has_all; combine them into one")
            c = by_field.setdefault(p.field, Constraint(p.field, "labels", mode=mode, values=[]))
            c.sources.append(src)
            c.values = sorted(set(c.values) | set(raw)) if mode == "all" else sorted(set(c.values or raw) & set(raw)) or sorted(raw)
        else:
            raise UserError(f"filter '{p}': cannot filter on {kind.value} field {p.field!r}")
    return list(by_field.values())


EXTRACT_SCHEMA = {"filters": "list"}


def _extract_nl(text: str, gateway: Gateway, desc: DatasetDescriptor | None) -> list[Predicate]:
    """Route a natural-language fragment through the gateway; validate, retrying once with a hint."""
    prompt = f"EXTRACT: {text}"
    problems: list[str] = []
    for attempt in range(2):
        try:
            out = gateway.complete_prompt(prompt, EXTRACT_SCHEMA)
        except SchemaInvalid as e:
            problems = [str(e)]
        else:
            problems, preds = [], []
            for f in out["filters"]:
                if not isinstance(f, dict) or not {"field", "op", "value"} <= set(f):
                    problems.append(f"malformed filter {f!r}")
                    continue
                if desc is not None and not desc.has_field(str(f["field"])):
                    problems.append(f"unknown field {f['field']!r}")
                    continue
                preds.append(Predicate.parse(f))
            if not problems:
                return preds
        fields = [f.name for f in desc.schema] if desc else []
        prompt = f"EXTRACT: {text}\nHINT: fix {'; '.join(problems)}; valid fields: {fields}"
    raise UserError(f"natural-language constraints failed validation after one retry: {'; '.join(problems)}")


def _steps(objective: str, has_filters: bool, has_dataset: bool) -> tuple[list[Step], list[str]]:
    src = [Step("source", "Data", (), "table")] if has_dataset else []
    flt = [Step("filter", "Data", ("table",), "table")] if has_filters else []
    if objective in ("classify", "regress"):
        return src + flt + [Step("project", "Data", ("table",), "table"),
                            Step("model", "Model", ("table",), "predictions")], ["predictions", "val_metric"]
    if objective == "search":
        return src + flt + [Step("retrieve", "Data", ("table",), "table")], ["hits"]
    if has_dataset:
        return src + flt + [Step("llm", "LLM", ("table",), "answers")], ["answers"]
    return [Step("llm", "LLM", (), "answers")], ["answers"]


def parse(request: DeclarativeRequest | Mapping, catalog: Catalog, gateway: Gateway | None = None) -> TaskSpec:
    req = request if isinstance(request, DeclarativeRequest) else DeclarativeRequest.from_dict(request)
    missing = [k for k in ("objective", "target") if not getattr(req, k)]
    if missing:
        hints = {"objective": f"one of {list(OBJECTIVES)}", "target": "a field name (classify/regress) or query text"}
        raise UserError("incomplete request: missing " + "; ".join(f"'{k}' ({hints[k]})" for k in missing))
    if req.objective not in OBJECTIVES:
        raise UserError(f"unknown objective {req.objective!r}; choose from {list(OBJECTIVES)}")
    budgets = {}
    for k, v in (req.budgets or {}).items():
        if k not in ("latency_ms", "cost", "quality_floor"):
            raise UserError(f"unknown budget {k!r}; use latency_ms, cost or quality_floor")
        nv = normalize_value(v)
        if not isinstance(nv, float) or nv < 0:
            raise UserError(f"budget {k} must be a non-negative number, got {v!r}")
        budgets[k] = nv
    desc = _ground_dataset(req, catalog)
    preds = [Predicate.parse(f) for f in req.filters or []]
    if req.nl:
        if gateway is None:
            raise UserError("request has a natural-language fragment but no gateway is configured")
        preds += _extract_nl(req.nl, gateway, desc)
    if preds and desc is None:
        raise UserError("filters need a dataset; set 'dataset'")
    constraints = canonicalize(preds, desc) if preds else []
    target_kind = None
    if req.objective in ("classify", "regress"):
        if not desc.has_field(req.target):
            raise UserError(f"unknown target field {req.target!r} in dataset {desc.dataset_id!r}")
        target_kind = desc.field(req.target).kind.value
        need = {"classify": ("categorical", "numeric"), "regress": ("numeric",)}[req.objective]
        if target_kind not in need:
            raise UserError(f"target {req.target!r} is {target_kind}; {req.objective} needs {' or '.join(need)}")
    if req.objective == "search" and (desc is None or desc.vector_field is None):
        raise UserError("search needs a dataset with a vector field; set 'dataset'")
    steps, outputs = _steps(req.objective, bool(constraints), desc is not None)
    return TaskSpec(req.objective, desc.dataset_id if desc else None, req.target, target_kind, constraints, outputs,
                    steps, dict(req.preferences or {}), budgets)

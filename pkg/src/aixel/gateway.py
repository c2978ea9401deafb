"""LLM gateway: templates, budgets, response cache, schema guardrails and a deterministic mock."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

from .errors import AixelError, BudgetExhausted, UserError

_SLOT = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_TYPES: dict[str, tuple[type, ...]] = {
    "str": (str,),
    "int": (int,),
    "float": (int, float),
    "bool": (bool,),
    "list": (list,),
    "object": (dict,),
}


def estimate_tokens(text: str) -> int:
    """Backend-independent estimate: one token per four characters."""
    return math.ceil(len(text) / 4)


class SchemaInvalid(AixelError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    segments: tuple[tuple[str, str], ...]  # ("text", literal) | ("slot", name)
    output_schema: Mapping[str, str] = field(default_factory=dict)
    max_retries: int = 1

    def __post_init__(self):
        names = [v for k, v in self.segments if k == "slot"]
        if len(names) != len(set(names)):
            raise UserError(f"template {self.template_id}: slot names must be unique")
        bad = {t for t in self.output_schema.values() if t not in _TYPES}
        if bad:
            raise UserError(f"template {self.template_id}: unknown output types {sorted(bad)}")

    @classmethod
    def parse(cls, template_id: str, text: str, output_schema: Mapping[str, str] | None = None, max_retries: int = 1):
        """Build from ``"literal {slot} literal"`` text."""
        segs, pos = [], 0
        for m in _SLOT.finditer(text):
            if m.start() > pos:
                segs.append(("text", text[pos : m.start()]))
            segs.append(("slot", m.group(1)))
            pos = m.end()
        if pos < len(text):
            segs.append(("text", text[pos:]))
        return cls(template_id, tuple(segs), dict(output_schema or {}), max_retries)

    @property
    def slots(self) -> list[str]:
        return [v for k, v in self.segments if k == "slot"]

    def render(self, slots: Mapping[str, Any]) -> str:
        missing = [s for s in self.slots if s not in slots]
        if missing:
            raise UserError(f"template {self.template_id}: unbound slots {missing}")
        return "".join(v if k == "text" else str(slots[v]) for k, v in self.segments)


def validate(obj: Any, schema: Mapping[str, str]) -> list[str]:
    """Problems with ``obj`` against a flat field -> type schema (extra fields are allowed)."""
    if not isinstance(obj, dict):
        return ["response is not a JSON object"]
    problems = []
    for name, typ in schema.items():
        if name not in obj:
            problems.append(f"missing field {name!r}")
        elif not isinstance(obj[name], _TYPES[typ]) or (typ in ("int", "float") and isinstance(obj[name], bool)):
            problems.append(f"field {name!r} should be {typ}")
    return problems


@dataclass
class GatewayBudget:
    max_calls: int | None = None
    max_tokens: int | None = None
    calls: int = 0
    tokens: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()

    def charge(self, tokens: int) -> None:
        """Reserve one call and ``tokens`` prompt tokens, or refuse without consuming anything."""
        with self._lock:
            if self.max_calls is not None and self.calls + 1 > self.max_calls:
                raise BudgetExhausted(f"call budget exhausted ({self.calls}/{self.max_calls})")
            if self.max_tokens is not None and self.tokens + tokens > self.max_tokens:
                raise BudgetExhausted(f"token budget exhausted ({self.tokens}+{tokens} > {self.max_tokens})")
            self.calls += 1
            self.tokens += tokens


class Backend(Protocol):
    backend_id: str

    def generate(self, prompt: str) -> str: ...


# -- deterministic mock ----------------------------------------------------------

def _h(*parts: Any) -> str:
    return hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).hexdigest()


def answer_for(template_id: str, query: str, seed: int) -> str:
    """The mock's answer to one query; independent of batching and demonstrations."""
    return f"ans-{_h(seed, template_id, query.strip())}"


_QUERY_LINE = re.compile(r"^\[(\d+)\] (.*)$")
_ANSWER_HEAD = re.compile(r"^ANSWER\[([^\]]*)\]:")

DECOMPOSE_GRAPH = {
    "steps": [
        {"id": "retrieve", "family": "Data"},
        {"id": "score", "family": "Model"},
        {"id": "explain", "family": "LLM"},
    ],
    "edges": [["retrieve", "score"], ["score", "explain"]],
}

_OPS = [
    (r"at least|no less than|>=|≥|over|above|more than|greater than", ">="),
    (r"at most|no more than|<=|≤|under|below|less than|within", "<="),
]


def _extract_filters(text: str) -> list[dict]:
    out = []
    for chunk in re.split(r",|\band\b", text):
        for pat, op in _OPS:
            m = re.search(rf"([A-Za-z_][A-Za-z0-9_]*)\s+(?:{pat})\s+([0-9.]+\s*[A-Za-z]*)", chunk.strip())
            if m:
                out.append({"field": m.group(1), "op": op, "value": m.group(2).replace(" ", "")})
                break
        else:
            m = re.search(r"([A-Za-z_][A-Za-z0-9_]*)\s+(?:is|=|==)\s+([A-Za-z0-9_.-]+)", chunk.strip())
            if m:
                out.append({"field": m.group(1), "op": "==", "value": m.group(2)})
    return out


def _rule_answer(prompt: str, seed: int) -> str:
    head = _ANSWER_HEAD.match(prompt)
    tid = head.group(1) if head else ""
    queries = []
    for line in prompt.splitlines():
        m = _QUERY_LINE.match(line)
        if m:
            queries.append(m.group(2))
    return json.dumps({"answers": [answer_for(tid, q, seed) for q in queries]})


def _rule_verify(prompt: str, seed: int) -> str:
    claim = prompt[len("VERIFY:"):].strip()
    ok = int(_h(seed, claim), 16) % 4 != 0
    return json.dumps({"verdict": "pass" if ok else "fail", "reason": f"rule-{_h(claim)[:6]}"})


DEFAULT_RULES: list[tuple[str, Callable[[str, int], str]]] = [
    ("DECOMPOSE:", lambda p, s: json.dumps(DECOMPOSE_GRAPH, sort_keys=True)),
    ("VERIFY:", _rule_verify),
    ("EXTRACT:", lambda p, s: json.dumps({"filters": _extract_filters(p[len("EXTRACT:"):])})),
    ("ANSWER[", _rule_answer),
]


class MockBackend:
    """Responses are a pure function of (prompt, seed, rule table).

    ``malformed`` makes the first N invocations return non-JSON text, for
    exercising the repair path.
    """

    def __init__(self, seed: int = 0, rules: Sequence[tuple[str, Callable[[str, int], str]]] | None = None,
                 malformed: int = 0):
        self.seed = seed
        self.rules = list(rules if rules is not None else DEFAULT_RULES)
        self.backend_id = f"mock:{seed}:{_h(*[r[0] for r in self.rules])}"
        self._malformed = malformed
        self.invocations = 0
        self._lock = threading.Lock()

    def generate(self, prompt: str) -> str:
        with self._lock:
            self.invocations += 1
            if self._malformed > 0:
                self._malformed -= 1
                return "<<not json>>"
        for prefix, fn in self.rules:
            if prompt.startswith(prefix):
                return fn(prompt, self.seed)
        return json.dumps({"echo": prompt})


class HttpBackend:
    """Optional adapter for a JSON completion endpoint; never used by the test suite.

    Expects ``POST {"prompt": ...}`` to return ``{"text": ...}``.
    """

    def __init__(self, endpoint: str, key_env: str = "AIXEL_GATEWAY_KEY", timeout: float = 30.0):
        self.endpoint, self.key_env, self.timeout = endpoint, key_env, timeout
        self.backend_id = f"http:{endpoint}"

    def generate(self, prompt: str) -> str:
        req = urllib.request.Request(self.endpoint, data=json.dumps({"prompt": prompt}).encode(),
                                     headers={"Content-Type": "application/json"})
        key = os.environ.get(self.key_env)
        if key:
            req.add_header("Authorization", f"Bearer {key}")
        with urllib.request.urlopen(req, timeout=self.timeout) as r:
            return json.loads(r.read())["text"]


def make_backend(kind: str = "mock", seed: int = 0) -> Backend:
    if kind == "mock":
        return MockBackend(seed)
    if kind == "http":
        endpoint = os.environ.get("AIXEL_GATEWAY_ENDPOINT")
        if not endpoint:
            raise UserError("gateway.backend=http needs AIXEL_GATEWAY_ENDPOINT in the environment")
        return HttpBackend(endpoint)
    raise UserError(f"unknown gateway backend {kind!r}; choose mock or http")


REPAIR = "\nREPAIR: the previous reply was invalid ({problems}). Reply with one JSON object with fields {fields}."


@dataclass
class GatewayTelemetry:
    calls: int = 0
    cache_hits: int = 0
    repairs: int = 0
    tokens: int = 0


class Gateway:
    def __init__(self, backend: Backend | None = None, budget: GatewayBudget | None = None, cache: bool = True):
        self.backend = backend or MockBackend()
        self.budget = budget or GatewayBudget()
        self.cache_enabled = cache
        self._cache: dict[tuple[str, str], dict] = {}
        self._lock = threading.Lock()
        self.telemetry = GatewayTelemetry()

    def complete(self, template: PromptTemplate, slots: Mapping[str, Any], budget: GatewayBudget | None = None) -> dict:
        return self.complete_prompt(template.render(slots), template.output_schema, budget, template.max_retries)

    def complete_prompt(self, prompt: str, schema: Mapping[str, str] | None = None,
                        budget: GatewayBudget | None = None, max_retries: int = 1) -> dict:
        schema = schema or {}
        key = (self.backend.backend_id, hashlib.sha256(prompt.encode()).hexdigest())
        if self.cache_enabled:
            with self._lock:
                hit = self._cache.get(key)
                if hit is not None:
                    self.telemetry.cache_hits += 1
                    return json.loads(json.dumps(hit))
        budget = budget or self.budget
        attempt_prompt, problems = prompt, []
        for attempt in range(max_retries + 1):
            tokens = estimate_tokens(attempt_prompt)
            budget.charge(tokens)
            with self._lock:
                self.telemetry.calls += 1
                self.telemetry.tokens += tokens
                if attempt:
                    self.telemetry.repairs += 1
            raw = self.backend.generate(attempt_prompt)
            try:
                obj = json.loads(raw)
                problems = validate(obj, schema)
            except json.JSONDecodeError:
                obj, problems = None, ["output is not valid JSON"]
            if not problems:
                if self.cache_enabled:
                    with self._lock:
                        self._cache[key] = obj
                return json.loads(json.dumps(obj))
            attempt_prompt = prompt + REPAIR.format(problems="; ".join(problems), fields=sorted(schema))
        raise SchemaInvalid(f"response failed schema validation after {max_retries} retr{'y' if max_retries == 1 else 'ies'}: "
                            + "; ".join(problems))

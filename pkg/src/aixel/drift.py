"""Slice-level drift monitoring with a hysteresis latch.

Each slice keeps two tumbling windows: one over all scores (label-free PSI)
and one over labelled observations (metric z statistics). A completed window
is compared with the rolling baseline of the previous B windows and then
joins that baseline. The aggregate score is the largest slice signal;
the latch advances once per observed micro-batch in which any slice
completed a window.
"""

from __future__ import annotations

import json
import math
import threading
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import DuplicateError, UnknownIdError, UserError
from .metrics import accuracy, auc, ece

PSI_BINS = 10
PSI_SMOOTH = 1e-4
BOOTSTRAP_DRAWS = 40


def rmse(y, p) -> float:
    y, p = np.asarray(y, float), np.asarray(p, float)
    return float(np.sqrt(np.mean((y - p) ** 2)))


# name -> metric function; extend to monitor more metrics
MONITOR_METRICS = {"auc": auc, "rmse": rmse, "accuracy": accuracy}
ALL = ("*", None)  # the implicit whole-population slice


@dataclass
class MonitoringSpec:
    model_version: str
    slices: list[tuple[str, Any]] = field(default_factory=list)
    metrics: tuple[str, ...] = ("auc",)
    window: int = 200
    baseline_windows: int = 5
    theta_up: float = 1.0
    theta_down: float = 0.7
    evidence_budget: int = 10
    psi_ref: float = 0.2
    z_ref: float = 3.0

    def __post_init__(self):
        self.slices = [tuple(s) for s in self.slices] or [ALL]
        self.metrics = tuple(self.metrics)
        if not self.theta_up > self.theta_down > 0:
            raise UserError(f"thresholds need theta_up > theta_down > 0, got {self.theta_up}, {self.theta_down}")
        if self.window < 30:
            raise UserError("window must hold at least 30 observations")
        if self.baseline_windows < 3:
            raise UserError("baseline horizon must be at least 3 windows")
        unknown = [m for m in self.metrics if m not in MONITOR_METRICS]
        if unknown:
            raise UserError(f"unknown metrics {unknown}; choose from {sorted(MONITOR_METRICS)}")
        if len(set(self.slices)) != len(self.slices):
            raise UserError("duplicate slice predicates")


@dataclass
class Observation:
    features: Mapping[str, Any]
    score: float
    label: float | None = None
    ref: tuple[str, str] | None = None  # (dataset, record_id) evidence pointer
    timestamp: float | None = None


@dataclass
class DriftEvent:
    model_version: str
    slices: dict[str, dict]
    score: float
    evidence: list[tuple[str, str]]
    timestamp: float | None
    suggestion: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def slice_name(s: tuple[str, Any]) -> str:
    return "*" if s == ALL else f"{s[0]}={s[1]}"


def psi(cur: np.ndarray, base: np.ndarray, bins: int = PSI_BINS) -> float:
    """PSI over equal-frequency bins fit on ``base``; empty bins smoothed to 1e-4."""
    edges = np.unique(np.quantile(base, np.linspace(0, 1, bins + 1)[1:-1]))
    p = np.bincount(np.searchsorted(edges, cur, side="right"), minlength=len(edges) + 1) / len(cur)
    q = np.bincount(np.searchsorted(edges, base, side="right"), minlength=len(edges) + 1) / len(base)
    p, q = np.maximum(p, PSI_SMOOTH), np.maximum(q, PSI_SMOOTH)
    return float(np.sum((p - q) * np.log(p / q)))


def normalized_psi(cur: np.ndarray, base: np.ndarray, bins: int = PSI_BINS) -> float:
    """PSI minus its sampling bias under the null, (k - 1)(1/n_cur + 1/n_base), floored at 0."""
    k = len(np.unique(np.quantile(base, np.linspace(0, 1, bins + 1)[1:-1]))) + 1
    return max(0.0, psi(cur, base, bins) - (k - 1) * (1 / len(cur) + 1 / len(base)))


class Hysteresis:
    """Fire on reaching ``up`` while disarmed; re-enable only after dropping to ``down``."""

    def __init__(self, up: float, down: float):
        self.up, self.down = up, down
        self.armed = False
        self.path: list[tuple[float, bool]] = []

    def update(self, score: float) -> bool:
        fired = False
        if self.armed:
            if score <= self.down:
                self.armed = False
        elif score >= self.up:
            self.armed = fired = True
        self.path.append((score, fired))
        return fired


@dataclass
class _SliceState:
    W: int
    B: int
    cur_scores: deque = None
    cur_refs: deque = None
    cur_inputs: deque = None
    lab_scores: deque = None
    lab_labels: deque = None
    base_scores: deque = None  # last B completed score windows
    base_inputs: deque = None
    base_metrics: dict = None  # metric -> deque of per-window values
    base_labelled: deque = None  # last B labelled windows as (scores, labels)
    signal: float = 0.0
    detail: dict = field(default_factory=dict)
    evidence: list = field(default_factory=list)

    def __post_init__(self):
        W, B = self.W, self.B
        self.cur_scores, self.cur_refs, self.cur_inputs = deque(maxlen=W), deque(maxlen=W), deque(maxlen=W)
        self.lab_scores, self.lab_labels = deque(maxlen=W), deque(maxlen=W)
        self.base_scores, self.base_inputs, self.base_labelled = deque(maxlen=B), deque(maxlen=B), deque(maxlen=B)
        self.base_metrics = {}


class _Monitor:
    def __init__(self, spec: MonitoringSpec, seed: int):
        self.spec = spec
        self.slices = {s: _SliceState(spec.window, spec.baseline_windows) for s in spec.slices}
        self.latch = Hysteresis(spec.theta_up, spec.theta_down)
        self.aggregate = 0.0
        self.pending: deque[DriftEvent] = deque()
        self.rng = np.random.default_rng(seed)
        self.lock = threading.Lock()
        self.n_observed = 0

    # -- window completion ---------------------------------------------------

    def _close_score_window(self, st: _SliceState) -> None:
        spec = self.spec
        cur = np.array(st.cur_scores)
        inputs = _input_means(st.cur_inputs)
        refs = list(st.cur_refs)
        st.cur_scores.clear()
        st.cur_refs.clear()
        st.cur_inputs.clear()
        if len(st.base_scores) == spec.baseline_windows:
            base = np.concatenate(st.base_scores)
            p = normalized_psi(cur, base)
            st.detail["psi"] = p
            st.detail["psi_term"] = p / spec.psi_ref
            st.detail["input_shift"] = _input_shift(inputs, list(st.base_inputs))
            # evidence: the observations farthest from the baseline median
            med = float(np.median(base))
            order = sorted(range(len(cur)), key=lambda i: (-abs(cur[i] - med), i))
            st.evidence = [refs[i] for i in order if refs[i] is not None][: spec.evidence_budget]
        st.base_scores.append(cur)
        st.base_inputs.append(inputs)

    def _close_label_window(self, st: _SliceState) -> None:
        spec = self.spec
        s, y = np.array(st.lab_scores), np.array(st.lab_labels)
        st.lab_scores.clear()
        st.lab_labels.clear()
        values = {m: MONITOR_METRICS[m](y, s) for m in spec.metrics}
        cal = ece(y, s) if set(np.unique(y)) <= {0, 1} else None
        if len(st.base_labelled) == spec.baseline_windows:
            pooled_s = np.concatenate([a for a, _ in st.base_labelled])
            pooled_y = np.concatenate([b for _, b in st.base_labelled])
            metric_detail, z_max = {}, 0.0
            inflate = math.sqrt(1 + 1 / spec.baseline_windows)
            for m, v in values.items():
                hist = np.array(st.base_metrics[m])
                sd = max(float(hist.std(ddof=1)), self._boot_sd(MONITOR_METRICS[m], pooled_y, pooled_s))
                z = abs(v - hist.mean()) / (sd * inflate) if sd > 0 else 0.0
                metric_detail[m] = {"current": v, "baseline": float(hist.mean()), "delta": v - float(hist.mean()), "z": z}
                z_max = max(z_max, z)
            st.detail["metrics"] = metric_detail
            st.detail["metric_term"] = z_max / spec.z_ref
            if cal is not None:
                hist = np.array(st.base_metrics["__ece__"])
                sd = max(float(hist.std(ddof=1)), self._boot_sd(ece, pooled_y, pooled_s))
                z = abs(cal - hist.mean()) / (sd * inflate) if sd > 0 else 0.0
                st.detail["ece"] = {"current": cal, "baseline": float(hist.mean()), "delta": cal - float(hist.mean()), "z": z}
                st.detail["ece_term"] = 0.5 * z / spec.z_ref
        for m, v in values.items():
            st.base_metrics.setdefault(m, deque(maxlen=spec.baseline_windows)).append(v)
        if cal is not None:
            st.base_metrics.setdefault("__ece__", deque(maxlen=spec.baseline_windows)).append(cal)
        st.base_labelled.append((s, y))

    def _boot_sd(self, fn, y, s) -> float:
        n = self.spec.window
        vals = []
        for _ in range(BOOTSTRAP_DRAWS):
            idx = self.rng.integers(0, len(y), n)
            vals.append(fn(y[idx], s[idx]))
        return float(np.std(vals, ddof=1))

    def _publish(self, ts) -> None:
        for st in self.slices.values():
            d = st.detail
            st.signal = max(d.get("psi_term", 0.0), d.get("metric_term", 0.0), d.get("ece_term", 0.0))
        self.aggregate = max(x.signal for x in self.slices.values())
        if self.latch.update(self.aggregate):
            self.pending.append(self._event(ts))

    def _event(self, ts) -> DriftEvent:
        spec = self.spec
        hit = {s: st for s, st in self.slices.items() if st.signal >= spec.theta_up}
        slices, evidence, metric_slices, any_psi = {}, [], 0, False
        for s, st in hit.items():
            d = st.detail
            metric_hit = max(d.get("metric_term", 0.0), d.get("ece_term", 0.0)) >= spec.theta_up
            metric_slices += metric_hit
            any_psi |= d.get("psi_term", 0.0) >= spec.theta_up
            slices[slice_name(s)] = {k: v for k, v in d.items()}
            evidence.extend(st.evidence)
        if metric_slices >= 2:
            suggestion = "try-zoo-candidate"
        elif metric_slices == 1:
            suggestion = "fine-tune"
        elif any_psi:
            suggestion = "recalibrate"
        else:
            suggestion = "keep"
        return DriftEvent(spec.model_version, slices, self.aggregate, evidence[: spec.evidence_budget], ts, suggestion)

    # -- ingest ----------------------------------------------------------------

    def observe(self, batch: Iterable) -> float:
        with self.lock:
            closed, ts = False, None
            for ob in batch:
                ob = ob if isinstance(ob, Observation) else Observation(*ob)
                self.n_observed += 1
                for s, st in self.slices.items():
                    if s != ALL and ob.features.get(s[0]) != s[1]:
                        continue
                    st.cur_scores.append(float(ob.score))
                    st.cur_refs.append(tuple(ob.ref) if ob.ref is not None else None)
                    st.cur_inputs.append({k: v for k, v in ob.features.items() if _is_num(v)})
                    if len(st.cur_scores) == self.spec.window:
                        self._close_score_window(st)
                        closed = True
                    if ob.label is not None:
                        st.lab_scores.append(float(ob.score))
                        st.lab_labels.append(ob.label)
                        if len(st.lab_scores) == self.spec.window:
                            self._close_label_window(st)
                            closed = True
                    ts = ob.timestamp
            if closed:
                self._publish(ts)
            return self.aggregate


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _input_means(rows) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for r in rows:
        for k, v in r.items():
            sums.setdefault(k, []).append(float(v))
    return {k: float(np.mean(v)) for k, v in sums.items()}


def _input_shift(cur: Mapping[str, float], base: Sequence[Mapping[str, float]]) -> dict[str, float]:
    """Per-feature change of the window mean versus the baseline mean (reported only; never scored)."""
    out = {}
    for k, v in cur.items():
        hist = [b[k] for b in base if k in b]
        if hist:
            out[k] = v - float(np.mean(hist))
    return out


class DriftMonitor:
    """Registry of monitors keyed by model version, with an optional JSONL event sink."""

    def __init__(self, events_path: str | Path | None = None, seed: int = 0):
        self._monitors: dict[str, _Monitor] = {}
        self.events_path = Path(events_path) if events_path else None
        self.seed = seed
        self.events: list[DriftEvent] = []

    def register(self, spec: MonitoringSpec) -> str:
        if spec.model_version in self._monitors:
            raise DuplicateError(f"model {spec.model_version} is already monitored")
        self._monitors[spec.model_version] = _Monitor(spec, self.seed)
        return spec.model_version

    def _get(self, handle: str) -> _Monitor:
        try:
            return self._monitors[handle]
        except KeyError:
            raise UnknownIdError(f"no monitor registered for {handle!r}") from None

    def observe(self, handle: str, batch: Iterable) -> float:
        return self._get(handle).observe(batch)

    def score(self, handle: str) -> float:
        return self._get(handle).aggregate

    def score_path(self, handle: str) -> list[tuple[float, bool]]:
        return list(self._get(handle).latch.path)

    def state_size(self, handle: str) -> int:
        """Number of buffered observations (bounded by slices x W x (B + 2))."""
        m = self._get(handle)
        return sum(len(st.cur_scores) + len(st.lab_scores) + sum(map(len, st.base_scores))
                   + sum(len(a) for a, _ in st.base_labelled) for st in m.slices.values())

    def poll(self, handle: str) -> tuple[DriftEvent | None, str]:
        m = self._get(handle)
        with m.lock:
            ev = m.pending.popleft() if m.pending else None
        if ev is None:
            return None, "keep"
        self.events.append(ev)
        if self.events_path:
            with open(self.events_path, "a") as f:
                f.write(ev.to_json() + "\n")
        return ev, ev.suggestion


def read_events(path: str | Path, model: str | None = None) -> list[dict]:
    out = []
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            if model is None or d["model_version"] == model:
                out.append(d)
    return out

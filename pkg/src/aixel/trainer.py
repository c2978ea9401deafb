"""Model construction: baseline learners, calibration refresh, short fine-tuning and a small zoo."""

from __future__ import annotations

import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import learners
from .catalog import Catalog, Record
from .errors import UserError
from .features import FeatureView
from .metrics import METRICS, ece, evaluate
from .selection import WorkingSet
from .store import ArtifactKind, ModelStore, Snapshot, compatibility

LEARNERS = {"regularized-linear": "ridge", "regularized-logistic": "logistic", "decision-stump-ensemble": "stumps"}
CALIBRATION_KNOTS = 20
MIN_CALIBRATION_LABELS = 100
FINETUNE_LR_SCALE = 0.1
RIDGE_GD_LR = 0.1  # initial step size for gradient fine-tuning of the linear learner
CHUNK = 25  # iterations between resource-cap checks


class ResourceCapError(UserError):
    pass


@dataclass(frozen=True)
class TrainerSpec:
    learner: str = "regularized-logistic"
    hyperparameters: Mapping = field(default_factory=dict)
    seed: int = 0
    max_seconds: float = 60.0
    max_memory_mb: float = 512.0

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise UserError(f"unknown learner {self.learner!r}; choose from {sorted(LEARNERS)}")
        if self.max_seconds <= 0 or self.max_memory_mb <= 0:
            raise UserError("resource caps must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainerSpec":
        unknown = set(d) - {"learner", "hyperparameters", "seed", "max_seconds", "max_memory_mb"}
        if unknown:
            raise UserError(f"unknown trainer spec keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {**asdict(self), "hyperparameters": dict(self.hyperparameters)}


@dataclass
class Calibration:
    """Monotone piecewise-linear map from raw score to calibrated probability (clamped outside the knots)."""

    x: list[float] = field(default_factory=lambda: [0.0, 1.0])
    y: list[float] = field(default_factory=lambda: [0.0, 1.0])

    def __call__(self, p):
        return np.interp(np.asarray(p, float), self.x, self.y)

    def to_bytes(self) -> bytes:
        return _canon({"x": self.x, "y": self.y})

    @classmethod
    def from_bytes(cls, b: bytes) -> "Calibration":
        d = json.loads(b)
        return cls(d["x"], d["y"])

    @property
    def monotone(self) -> bool:
        return all(b >= a for a, b in zip(self.y, self.y[1:])) and all(b >= a for a, b in zip(self.x, self.x[1:]))


def _pav(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted pool-adjacent-violators: the non-decreasing fit to ``y``."""
    blocks: list[list[float]] = []  # [mean, weight, count]
    for yi, wi in zip(y, w):
        blocks.append([float(yi), float(wi), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2])
    return np.concatenate([np.full(c, m) for m, _, c in blocks])


def fit_calibration(scores, labels, knots: int = CALIBRATION_KNOTS) -> Calibration:
    """Equal-frequency bins give (mean score, mean label) knots, made monotone by PAV."""
    s, y = np.asarray(scores, float), np.asarray(labels, float)
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    bins = [b for b in np.array_split(np.arange(len(s)), min(knots, len(s))) if len(b)]
    kx = np.array([s[b].mean() for b in bins])
    ky = np.array([y[b].mean() for b in bins])
    kw = np.array([len(b) for b in bins], float)
    # ties in knot position collapse into one knot
    ux, inv = np.unique(kx, return_inverse=True)
    uy = np.bincount(inv, weights=ky * kw) / np.bincount(inv, weights=kw)
    uw = np.bincount(inv, weights=kw)
    return Calibration(ux.tolist(), np.clip(_pav(uy, uw), 0.0, 1.0).tolist())


@dataclass
class TrainedModel:
    learner: str
    model: object
    features: list[str]
    evals: dict[str, float]  # val segment only
    metric: str
    calibration: Calibration
    view_manifest_id: str
    train_metrics: dict[str, float] = field(default_factory=dict)
    capped: bool = False
    snapshot: Snapshot | None = None

    def params_bytes(self) -> bytes:
        return _canon(self.model.params())

    @property
    def params_hash(self) -> str:
        return hashlib.sha256(self.params_bytes()).hexdigest()

    def predict(self, X) -> np.ndarray:
        raw = self.model.predict(X)
        return self.calibration(raw) if self.metric in ("auc", "accuracy", "log_loss") else raw


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def view_manifest_id(doc: Mapping) -> str:
    return hashlib.sha256(_canon({"columns": doc["columns"], "view_id": doc["view_id"]})).hexdigest()[:16]


def _tensor_bytes(X: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(X, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _segment_data(catalog: Catalog, dataset: str, ws: WorkingSet, view: FeatureView, target: str, segment: str):
    ids = ws.ids(segment)
    recs: list[Record] = []
    for rid in ids:
        r = catalog.get(dataset, rid)
        if r is not None and isinstance(r.values.get(target), (int, float)) and not isinstance(r.values.get(target), bool):
            recs.append(r)
    weights = {m.record_id: m.weight for m in ws.members}
    X = view.apply(recs) if recs else np.zeros((0, len(view.columns)))
    y = np.array([float(r.values[target]) for r in recs])
    w = np.array([weights[r.record_id] for r in recs])
    return X, y, w


def _metrics_for(y, p, binary: bool) -> dict[str, float]:
    if len(y) == 0:
        return {}
    if binary:
        out = {"accuracy": evaluate("accuracy", y, p), "log_loss": evaluate("log_loss", y, p), "ece": ece(y, p)}
        if len(set(y.tolist())) > 1:
            out["auc"] = evaluate("auc", y, p)
        return out
    return {"mse": evaluate("mse", y, p), "r2": evaluate("r2", y, p)}


def _make(learner: str, hp: Mapping, binary: bool):
    kind = LEARNERS[learner]
    if kind == "logistic":
        if not binary:
            raise UserError("regularized-logistic needs a binary 0/1 target")
        return learners.Logistic(**hp)
    if kind == "stumps":
        return learners.StumpBoost(task="binary" if binary else "regression", **hp)
    return learners.Ridge(**hp)


def _fit_capped(model, X, y, w, spec: TrainerSpec, init=None, lr_scale: float = 1.0, iterations: int | None = None):
    """Fit in chunks so a time cap stops cleanly with the best-so-far parameters."""
    est_mb = X.nbytes * 4 / 1e6
    if est_mb > spec.max_memory_mb:
        raise ResourceCapError(f"training needs ~{est_mb:.0f} MB, cap is {spec.max_memory_mb:g} MB")
    if isinstance(model, learners.Ridge):
        return model.fit(X, y, w), False
    attr = "epochs" if isinstance(model, learners.Logistic) else "n_rounds"
    total = getattr(model, attr) if iterations is None else iterations
    t0 = time.perf_counter()
    done, capped, cur = 0, False, init
    while done < total:
        step = min(CHUNK, total - done)
        setattr(model, attr, step)
        model.fit(X, y, w, init=cur, lr_scale=lr_scale)
        cur = type(model).from_params(model.params())
        done += step
        if done < total and time.perf_counter() - t0 > spec.max_seconds:
            capped = True
            break
    setattr(model, attr, total if iterations is None else getattr(init, attr, total))
    return model, capped


def train(catalog: Catalog, dataset: str, ws: WorkingSet, view: FeatureView, target: str,
          spec: TrainerSpec | None = None, store: ModelStore | None = None, branch: str = "main",
          view_manifest: Mapping | None = None, objective: str | None = None) -> TrainedModel:
    spec = spec or TrainerSpec()
    manifest = dict(view_manifest or view.to_manifest())
    Xtr, ytr, wtr = _segment_data(catalog, dataset, ws, view, target, "train")
    if len(ytr) == 0:
        raise UserError("train segment is empty; widen the working set or its fractions")
    if len(set(ytr.tolist())) < 2:
        raise UserError(f"degenerate target {target!r}: a single value in the train segment")
    binary = set(np.unique(ytr).tolist()) <= {0.0, 1.0}
    model, capped = _fit_capped(_make(spec.learner, spec.hyperparameters, binary), Xtr, ytr, wtr, spec)
    metric = "auc" if binary else "r2"
    Xva, yva, _ = _segment_data(catalog, dataset, ws, view, target, "val")
    tm = TrainedModel(spec.learner, model, list(view.names), _metrics_for(yva, model.predict(Xva), binary), metric,
                      Calibration(), view_manifest_id(manifest), _metrics_for(ytr, model.predict(Xtr), binary), capped)
    if store is not None:
        objective = objective or ("classify" if binary else "regress")
        fields = {c["name"]: _kind_of(catalog, dataset, c["name"]) for c in manifest["columns"] if "*" not in c["name"]}
        fields[target] = _kind_of(catalog, dataset, target)
        meta = {"op": "train", "eval": tm.evals, "compat": compatibility(fields, objective, metric),
                "trainer": spec.to_dict(), "capped": capped, "working_set": ws.manifest_id}
        changes = {
            (ArtifactKind.MODEL, "params"): tm.params_bytes(),
            (ArtifactKind.MODEL, "calibration"): tm.calibration.to_bytes(),
            (ArtifactKind.TENSOR, "features"): _tensor_bytes(Xtr),
            (ArtifactKind.METADATA, "view"): _canon({"manifest": manifest, "manifest_id": tm.view_manifest_id,
                                                     "features": tm.features, "target": target, "learner": spec.learner,
                                                     "dataset": dataset, "metric": metric}),
            (ArtifactKind.INDEX, "keys"): _canon({"dataset": dataset, "target": target, "objective": objective,
                                                  "fields": sorted(fields)}),
        }
        tm.snapshot = store.commit(branch, changes, meta)
    return tm


def _kind_of(catalog: Catalog, dataset: str, name: str) -> str:
    d = catalog.descriptor(dataset)
    return d.field(name).kind.value if d.has_field(name) else "derived"


def load(store: ModelStore, version: str) -> TrainedModel:
    snap = store.snapshot(version)
    meta = json.loads(store.read(version, ArtifactKind.METADATA, "view"))
    model = learners.from_params(json.loads(store.read(version, ArtifactKind.MODEL, "params")))
    cal = Calibration.from_bytes(store.read(version, ArtifactKind.MODEL, "calibration"))
    tm = TrainedModel(meta["learner"], model, meta["features"], dict(snap.metadata.get("eval") or {}), meta["metric"],
                      cal, meta["manifest_id"], capped=bool(snap.metadata.get("capped")), snapshot=snap)
    return tm


def _branch_of(store: ModelStore, version: str, branch: str | None) -> str:
    if branch is not None:
        return branch
    for name, head in store.branches().items():
        if head == version:
            return name
    raise UserError(f"version {version[:12]} is not a branch head; pass branch= explicitly")


def recalibrate(store: ModelStore, version: str, scores, labels, branch: str | None = None) -> Snapshot:
    """Refit only the calibration map on a labelled window of raw model scores."""
    s, y = np.asarray(scores, float), np.asarray(labels, float)
    if len(s) != len(y):
        raise UserError("scores and labels differ in length")
    if len(y) < MIN_CALIBRATION_LABELS:
        raise UserError(f"insufficient labels for recalibration: {len(y)} < {MIN_CALIBRATION_LABELS}")
    parent = load(store, version)
    before = ece(y, parent.calibration(s))
    cal = fit_calibration(s, y)
    after = ece(y, cal(s))
    if after > before:  # never make the window worse; keep the parent map shape but record the attempt
        cal, after = parent.calibration, before
    meta = {**store.snapshot(version).metadata, "op": "recalibrate", "ece_before": before, "ece_after": after,
            "window": len(y)}
    meta.pop("created", None)
    return store.commit(_branch_of(store, version, branch), {(ArtifactKind.MODEL, "calibration"): cal.to_bytes()},
                        meta, expected_head=version)


def _ridge_steps(model: learners.Ridge, X, y, w, steps: int, lr: float) -> learners.Ridge:
    Z = (np.asarray(X, float) - model.mu) / model.sd
    w = w / w.sum()
    coef, b = model.coef.copy(), float(model.intercept)
    for _ in range(steps):
        r = Z @ coef + b - y
        coef = coef - lr * ((Z * (w * r)[:, None]).sum(axis=0) + model.alpha * coef / max(len(y), 1))
        b = b - lr * float(np.sum(w * r))
    model.coef, model.intercept = coef, b
    return model


def finetune(store: ModelStore, version: str, catalog: Catalog, dataset: str, delta: WorkingSet,
             view_manifest: Mapping, steps: int, target: str | None = None, branch: str | None = None,
             spec: TrainerSpec | None = None) -> Snapshot:
    """Warm-started short training on new records; needs the parent's feature-view manifest."""
    if steps < 0:
        raise UserError("step budget must be >= 0")
    parent = load(store, version)
    meta_doc = json.loads(store.read(version, ArtifactKind.METADATA, "view"))
    if view_manifest_id(view_manifest) != parent.view_manifest_id:
        raise UserError("feature-view manifest differs from the parent model's; run `model train` for a full retrain")
    target = target or meta_doc["target"]
    branch = _branch_of(store, version, branch)
    base_meta = {k: v for k, v in store.snapshot(version).metadata.items() if k != "created"}
    if steps == 0:
        return store.commit(branch, {}, {**base_meta, "op": "finetune", "steps": 0}, expected_head=version)
    view = FeatureView.from_manifest(view_manifest)
    X, y, w = _segment_data(catalog, dataset, delta, view, target, "train")
    if len(y) == 0:
        raise UserError("delta working set has no train records")
    spec = spec or TrainerSpec(parent.learner)
    init = parent.model
    if isinstance(init, learners.Ridge):
        model, capped = _ridge_steps(learners.Ridge.from_params(init.params()), X, y, w, steps, RIDGE_GD_LR * FINETUNE_LR_SCALE), False
    else:
        fresh = type(init).from_params(init.params())
        model, capped = _fit_capped(fresh, X, y, w, spec, init=init, lr_scale=FINETUNE_LR_SCALE, iterations=steps)
    Xva, yva, _ = _segment_data(catalog, dataset, delta, view, target, "val")
    if len(yva) == 0:
        evals = dict(parent.evals)
    else:
        evals = _metrics_for(yva, model.predict(Xva), parent.metric in ("auc", "accuracy"))
    meta = {**base_meta, "op": "finetune", "steps": steps, "eval": evals, "capped": capped,
            "working_set": delta.manifest_id}
    return store.commit(branch, {(ArtifactKind.MODEL, "params"): _canon(model.params())}, meta, expected_head=version)


def zoo(catalog: Catalog, dataset: str, ws: WorkingSet, view: FeatureView, target: str, seed: int = 0,
        store: ModelStore | None = None, branch: str = "main", candidates: Sequence[str] | None = None) -> TrainedModel:
    """Train every applicable learner and keep the best on the val metric (committing only that one)."""
    results = []
    for name in candidates or sorted(LEARNERS):
        try:
            results.append(train(catalog, dataset, ws, view, target, TrainerSpec(name, seed=seed)))
        except UserError:
            continue
    if not results:
        raise UserError("no learner in the zoo could be trained on this target")
    metric = results[0].metric
    higher = METRICS[metric][1]
    best = sorted(results, key=lambda r: ((-1 if higher else 1) * r.evals.get(metric, -np.inf if higher else np.inf), r.learner))[0]
    if store is not None:
        best = train(catalog, dataset, ws, view, target, TrainerSpec(best.learner, seed=seed), store, branch)
    return best

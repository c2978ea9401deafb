"""Command-line entry point.

Exit codes: 0 success, 1 user error, 2 internal error. Failures print one JSON
line ``{"error": <type>, "message": <text>, "exit": <code>}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .catalog import Catalog, read_records, read_schema
from .config import EngineConfig, load_config
from .errors import UserError
from .features import FeatureView, build_view, select_features_cmi

STATE_DIRS = ("catalog", "indexes", "worksets", "views", "store", "telemetry")


class UsageError(UserError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- engine state ------------------------------------------------------------------

class Engine:
    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        root = Path(cfg.data_dir)
        try:
            for d in STATE_DIRS:
                (root / d).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UserError(f"cannot create data directory {root}: {exc.strerror}") from None
        self._catalog: Catalog | None = None
        self._store = None

    @property
    def catalog(self) -> Catalog:
        if self._catalog is None:
            self._catalog = Catalog(self.cfg.path("catalog"))
        return self._catalog

    @property
    def store(self):
        from .store import ModelStore

        if self._store is None:
            self._store = ModelStore(self.cfg.path("store"))
        return self._store

    def working_set(self, dataset: str):
        from .selection import WorkingSet

        p = self.cfg.path("worksets", f"{dataset}.json")
        if not p.exists():
            raise UserError(f"no working set for {dataset!r}; run `aixel select` first")
        return WorkingSet.load(p)

    def view_doc(self, dataset: str) -> dict:
        p = self.cfg.path("views", f"{dataset}.json")
        if not p.exists():
            raise UserError(f"no feature view for {dataset!r}; run `aixel features` first")
        return json.loads(p.read_text())

    def gateway(self, max_tokens: int | None = None):
        from .gateway import Gateway, GatewayBudget, HttpBackend, MockBackend

        backend = MockBackend() if self.cfg.gateway_backend == "mock" else HttpBackend(self.cfg.gateway_endpoint)
        return Gateway(backend, GatewayBudget(max_tokens=max_tokens))


# -- helpers -----------------------------------------------------------------------

def _read_json(path: str) -> Any:
    p = Path(path)
    if not p.exists():
        raise UserError(f"file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc.msg})") from None


def _json_or_file(text: str) -> Any:
    """Inline JSON, or ``@path`` to read it from a file."""
    if text.startswith("@"):
        return _read_json(text[1:])
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UserError(f"invalid JSON argument ({exc.msg})") from None


def _search_filters(exprs: Sequence[str]):
    from .search import Filter
    from .task.request import Predicate

    ops = {"in": "any", "has": "any", "has_all": "all"}
    out = []
    for e in exprs:
        p = Predicate.parse(e)
        if p.op == "!=":
            raise UserError(f"search filters do not support '!=' ({e!r})")
        if p.op in ops:
            out.append(Filter(p.field, ops[p.op], p.value))
        else:
            try:
                out.append(Filter(p.field, p.op, float(p.value)))
            except ValueError:
                raise UserError(f"filter {e!r} needs a numeric value") from None
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    cols = list(rows[0])
    cells = [[_cell(r.get(c)) for c in cols] for r in rows]
    width = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, width))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, width)) for row in cells]
    return "\n".join(lines)


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (dict, list)):
        return json.dumps(_jsonable(v), sort_keys=True)
    return "" if v is None else str(v)


def _emit(args, payload: dict, rows: list[dict] | None = None, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(_jsonable(payload), sort_keys=True))
    elif text is not None:
        print(text)
    elif rows is not None:
        print(_table(rows))
    else:
        print(_table([{"key": k, "value": v} for k, v in payload.items()]))


# -- subcommands -------------------------------------------------------------------

def cmd_ingest(eng: Engine, args) -> dict:
    cat = eng.catalog
    if args.dataset not in cat:
        if not args.schema:
            raise UserError(f"unknown dataset {args.dataset!r}; pass --schema to register it")
        desc = read_schema(args.schema)
        if desc.dataset_id != args.dataset:
            raise UserError(f"schema declares dataset {desc.dataset_id!r}, not {args.dataset!r}")
        cat.register_dataset(desc)
    if not Path(args.records).exists():
        raise UserError(f"file not found: {args.records}")
    rep = cat.ingest(args.dataset, read_records(args.records))
    out = {"dataset": args.dataset, **rep.to_dict(), "snapshot_id": cat.snapshot_id(args.dataset)}
    _emit(args, out, text=f"{args.dataset}: accepted {rep.n_accepted}, rejected {rep.n_rejected}")
    return out


def cmd_index_build(eng: Engine, args) -> dict:
    from .dataset_index import DatasetIndex

    idx, rep = DatasetIndex.build(eng.catalog, args.dataset, args.attr, args.labels, eng.cfg.index_params())
    idx.save(eng.cfg.path("indexes", args.dataset))
    out = {"dataset": args.dataset, **rep.to_dict()}
    _emit(args, out, text=f"{args.dataset}: {rep.node_count} nodes, {rep.edge_count} edges, {len(rep.skipped)} skipped")
    return out


def cmd_search(eng: Engine, args) -> dict:
    from .dataset_index import DatasetIndex
    from .search import derive_profile

    idx = DatasetIndex.load(eng.cfg.path("indexes", args.dataset))
    vec = _json_or_file(args.vector)
    if not isinstance(vec, list):
        raise UserError("--vector must be a JSON list of numbers")
    profile = derive_profile(_search_filters(args.filter), idx.attr_field, idx.label_field, args.relax)
    res = idx.search(vec, args.k, profile, eng.cfg.rank_weights(), args.ef or eng.cfg.search_ef)
    if args.evidence:
        idx.attach_evidence(res, eng.catalog, args.evidence)
    rows = [{"record_id": idx.record_of.get(c.node_id), **c.to_dict()} for c in res.candidates]
    out = {"dataset": args.dataset, "results": rows, "visited": res.visited, "diagnostic": res.diagnostic}
    _emit(args, out, rows=rows if rows else None, text=None if rows else f"no results: {res.diagnostic or 'empty'}")
    return out


def cmd_select(eng: Engine, args) -> dict:
    from .selection import SelectionSpec, select_dataset

    spec = SelectionSpec(args.target, args.budget, args.metric, tuple(args.slice_key),
                         eng.cfg.selection_dedup_threshold, seed=eng.cfg.selection_seed)
    ws = select_dataset(eng.catalog, args.dataset, spec)
    ws.save(eng.cfg.path("worksets", f"{args.dataset}.json"))
    counts = {s: len(ws.ids(s)) for s in ("train", "val", "test")}
    out = {"dataset": args.dataset, "manifest_id": ws.manifest_id, "members": len(ws.members), "segments": counts}
    _emit(args, out, text=f"{args.dataset}: {len(ws.members)} members {counts} manifest {ws.manifest_id[:12]}")
    return out


def cmd_features(eng: Engine, args) -> dict:
    ws = eng.working_set(args.dataset)
    desc = eng.catalog.descriptor(args.dataset)
    names = args.fields or [f.name for f in desc.schema if f.name != args.target and f.kind.value != "vector"]
    kinds = {n: desc.field(n).kind.value for n in names}
    recs = [r for r in (eng.catalog.get(args.dataset, i) for i in ws.ids("train")) if r is not None]
    recs = [r for r in recs if r.values.get(args.target) is not None]
    if not recs:
        raise UserError("train segment holds no labelled records")
    view = build_view(recs, kinds, view_id=f"{args.dataset}-view", working_set=ws.manifest_id)
    y = np.array([r.values[args.target] for r in recs])
    selected = select_features_cmi(view, y, args.k or len(names))
    if not selected:
        raise UserError("no feature carries information about the target")
    keep = {n for n, _ in selected}
    narrowed = FeatureView(view.view_id, [c for c in view.columns if c.name in keep], np.zeros((0, 0)), [],
                           view.working_set)
    doc = {"target": args.target, "manifest": narrowed.to_manifest(selected=selected)}
    eng.cfg.path("views", f"{args.dataset}.json").write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True))
    rows = [{"feature": n, "gain": s} for n, s in selected]
    out = {"dataset": args.dataset, "selected": rows}
    _emit(args, out, rows=rows)
    return out


def cmd_model_train(eng: Engine, args) -> dict:
    from . import trainer

    ws = eng.working_set(args.dataset)
    doc = eng.view_doc(args.dataset)
    target = args.target or doc["target"]
    view = FeatureView.from_manifest(doc["manifest"])
    spec = trainer.TrainerSpec(args.learner, seed=args.seed, max_seconds=args.max_seconds)
    if args.zoo:
        tm = trainer.zoo(eng.catalog, args.dataset, ws, view, target, args.seed, eng.store, args.branch)
    else:
        tm = trainer.train(eng.catalog, args.dataset, ws, view, target, spec, eng.store, args.branch, doc["manifest"])
    out = {"version": tm.snapshot.version, "branch": args.branch, "learner": tm.learner, "eval": tm.evals,
           "capped": tm.capped}
    _emit(args, out, text=f"{tm.snapshot.version}  {tm.learner}  " + " ".join(f"{k}={v:.4f}" for k, v in tm.evals.items()))
    return out


def _artifact_key(text: str):
    from .store import ArtifactKind

    kind, sep, name = text.partition("/")
    if not sep or not name:
        raise UserError(f"artifact key {text!r} must look like kind/name")
    return ArtifactKind.parse(kind), name


def cmd_model_commit(eng: Engine, args) -> dict:
    changes: dict = {}
    for item in args.put:
        key, sep, path = item.partition("=")
        if not sep:
            raise UserError(f"--put {item!r} must look like kind/name=path")
        p = Path(path)
        if not p.exists():
            raise UserError(f"file not found: {path}")
        changes[_artifact_key(key)] = p.read_bytes()
    for key in args.delete:
        changes[_artifact_key(key)] = None
    meta = {}
    for item in args.meta:
        k, sep, v = item.partition("=")
        if not sep:
            raise UserError(f"--meta {item!r} must look like key=value")
        meta[k] = v
    if args.message:
        meta["message"] = args.message
    snap = eng.store.commit(args.branch, changes, meta)
    out = {"version": snap.version, "branch": args.branch, "parents": list(snap.parents)}
    _emit(args, out, text=snap.version)
    return out


def cmd_model_branch(eng: Engine, args) -> dict:
    start = args.from_version
    if start is not None and start in eng.store.branches():
        start = eng.store.branches()[start]
    h = eng.store.branch(start, args.name)
    out = {"branch": h.name, "head": h.head}
    _emit(args, out, text=f"{h.name} -> {h.head or '(empty)'}")
    return out


def cmd_model_merge(eng: Engine, args) -> dict:
    res = eng.store.merge(args.a, args.b, args.policy, args.metric, args.note)
    conflicts = [{"kind": c.kind, "name": c.name, "chosen": c.chosen} for c in res.conflicts]
    out = {"version": res.snapshot.version, "parents": list(res.snapshot.parents), "conflicts": conflicts,
           "warnings": res.warnings}
    _emit(args, out, text=f"{res.snapshot.version}  conflicts={len(conflicts)}")
    return out


def cmd_model_log(eng: Engine, args) -> dict:
    snaps = eng.store.log(args.ref)
    rows = [{"version": s.version, "parents": ",".join(p[:12] for p in s.parents), "op": s.metadata.get("op", ""),
             "eval": s.metadata.get("eval", {})} for s in snaps]
    out = {"ref": args.ref, "snapshots": rows}
    _emit(args, out, rows=rows)
    return out


def cmd_model_resolve(eng: Engine, args) -> dict:
    if args.schema:
        schema = _json_or_file(args.schema)
    elif args.dataset:
        schema = {f.name: f.kind.value for f in eng.catalog.descriptor(args.dataset).schema}
    else:
        raise UserError("pass --dataset or --schema")
    if not isinstance(schema, dict):
        raise UserError("--schema must be a JSON object of field -> kind")
    snap = eng.store.resolve({"objective": args.objective, "metric": args.metric}, schema)
    out = {"version": snap.version, "metadata": snap.metadata}
    _emit(args, out, text=snap.version)
    return out


def _observations_from_model(eng: Engine, args):
    from . import trainer
    from .drift import Observation

    tm = trainer.load(eng.store, args.model)
    doc = json.loads(eng.store.read(args.model, "metadata", "view"))
    view = FeatureView.from_manifest(doc["manifest"])
    target = doc["target"]
    recs = list(eng.catalog.records(args.dataset))
    scores = tm.predict(view.apply(recs)) if recs else []
    for r, s in zip(recs, scores):
        lab = r.values.get(target)
        yield Observation(r.values, float(s), None if lab is None else float(lab), (args.dataset, r.record_id), r.timestamp)


def _observations_from_file(path: str):
    from .drift import Observation

    if not Path(path).exists():
        raise UserError(f"file not found: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                o = json.loads(line)
                yield Observation(o.get("features", {}), float(o["score"]), o.get("label"),
                                  tuple(o["ref"]) if o.get("ref") else None, o.get("timestamp"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UserError(f"{path}:{lineno}: bad observation ({exc})") from None


def cmd_drift_watch(eng: Engine, args) -> dict:
    from .drift import DriftMonitor, MonitoringSpec

    if bool(args.observations) == bool(args.dataset):
        raise UserError("pass exactly one of --observations or --dataset")
    slices = []
    for s in args.slice:
        k, sep, v = s.partition("=")
        if not sep:
            raise UserError(f"--slice {s!r} must look like field=value")
        slices.append((k, v))
    spec = MonitoringSpec(args.model, slices, tuple(args.metric or ["auc"]), args.window or eng.cfg.drift_window,
                          theta_up=eng.cfg.drift_theta_up, theta_down=eng.cfg.drift_theta_down)
    mon = DriftMonitor(eng.cfg.path("drift-events.jsonl"))
    h = mon.register(spec)
    obs = _observations_from_file(args.observations) if args.observations else _observations_from_model(eng, args)
    events, n, batch = [], 0, []

    def flush():
        mon.observe(h, batch)
        while True:
            ev, _ = mon.poll(h)
            if ev is None:
                break
            events.append(json.loads(ev.to_json()))

    for ob in obs:
        batch.append(ob)
        n += 1
        if len(batch) == spec.window:
            flush()
            batch = []
    if batch:
        flush()
    out = {"model": args.model, "observations": n, "score": mon.score(h), "events": events}
    rows = [{"slices": ",".join(e["slices"]), "score": e["score"], "suggestion": e["suggestion"]} for e in events]
    _emit(args, out, rows=rows if rows else None,
          text=None if rows else f"{n} observations, no drift events (score {mon.score(h):.3f})")
    return out


def cmd_task_run(eng: Engine, args) -> dict:
    from .task import Telemetry, run_task
    from .task.request import DeclarativeRequest

    if not Path(args.request).exists():
        raise UserError(f"request file not found: {args.request}")
    req = DeclarativeRequest.load(args.request)
    cost = req.budgets.get("cost") if isinstance(req.budgets, dict) else None
    gw = eng.gateway(int(cost) if cost is not None else None)
    run = run_task(req, eng.catalog, gw, telemetry=Telemetry(eng.cfg.path("telemetry")),
                   max_workers=eng.cfg.workers, execute=not args.dry_run)
    res = run.result
    out = {"spec": run.spec.to_dict(), "plan": run.plan.to_dict(),
           "status": None if res is None else res.status,
           "reason": None if res is None else res.reason,
           "outputs": None if res is None else {k: _summarize(v) for k, v in res.outputs.items()}}
    text = []
    if args.explain:
        text.append(_explain_text(run))
    if res is not None:
        text.append(f"status: {res.status}" + (f" ({res.reason})" if res.reason else ""))
        for k, v in res.outputs.items():
            text.append(f"{k}: {json.dumps(_jsonable(_summarize(v)), sort_keys=True)}")
    if args.explain and args.json:
        out["explain"] = run.explain()
        out["bindings"] = out["explain"]["bindings"]
    _emit(args, out, text="\n".join(text))
    return out


def _explain_text(run) -> str:
    lines = ["bindings:"]
    for b in run.bindings:
        fb = f" (fallback {b.fallback.op_id})" if b.fallback else ""
        lines.append(f"  {b.step}: {b.op.op_id}{fb}")
    lines += ["plan:"] + ["  " + ln for ln in run.plan.explain().splitlines()]
    lines.append("rewrite log:")
    for entry in run.plan.log or [{"rule": "none"}]:
        extra = {k: v for k, v in entry.items() if k not in ("rule", "guards", "member_guards")}
        guards = entry.get("guards") or {}
        g = " guards " + ",".join(f"{k}={'pass' if v.get('pass') else 'fail'}" for k, v in guards.items()) if guards else ""
        lines.append(f"  {entry['rule']} {json.dumps(_jsonable(extra), sort_keys=True)}{g}")
    return "\n".join(lines)


def _summarize(v):
    """Long lists are cut to their first 20 items; arrays become lists."""
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _summarize(x) for k, x in v.items() if k != "model"}
    if isinstance(v, list) and len(v) > 20:
        return v[:20] + [f"... {len(v) - 20} more"]
    return v


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")
    common.add_argument("--config", default=argparse.SUPPRESS, help="config file (default aixel.toml)")
    common.add_argument("--data-dir", default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)

    p = _Parser(prog="aixel", description="Desk-scale data and model engine.", parents=[common])
    p.add_argument("--version", action="version", version=f"aixel {__version__}")
    sub = p.add_subparsers(dest="cmd", metavar="COMMAND", parser_class=_Parser)

    def leaf(parent, name, fn, help_):
        q = parent.add_parser(name, help=help_, parents=[common])
        q.set_defaults(fn=fn)
        return q

    q = leaf(sub, "ingest", cmd_ingest, "ingest JSONL records into a dataset")
    q.add_argument("--dataset", required=True)
    q.add_argument("--records", required=True, help="JSONL file, one record per line with an _id")
    q.add_argument("--schema", help="schema JSON, needed the first time a dataset is seen")

    idx = sub.add_parser("index", help="vector index commands")
    isub = idx.add_subparsers(dest="sub", metavar="SUBCOMMAND", parser_class=_Parser, required=True)
    q = leaf(isub, "build", cmd_index_build, "build and persist the dataset's fusion index")
    q.add_argument("--dataset", required=True)
    q.add_argument("--attr", help="numeric attribute field")
    q.add_argument("--labels", help="label-set field")
    q.add_argument("--max-degree", type=int, default=argparse.SUPPRESS, dest="index_max_degree")
    q.add_argument("--ef-construction", type=int, default=argparse.SUPPRESS, dest="index_ef_construction")
    q.add_argument("--metric", choices=["cosine", "euclidean"], default=argparse.SUPPRESS, dest="index_metric")

    q = leaf(sub, "search", cmd_search, "constrained nearest-neighbour search")
    q.add_argument("--dataset", required=True)
    q.add_argument("--vector", required=True, help="JSON list or @file")
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--filter", action="append", default=[], help="e.g. 'price >= 10' or 'tags has a,b'")
    q.add_argument("--ef", type=int)
    q.add_argument("--relax", type=int, default=0, help="relaxation budget")
    q.add_argument("--weights", default=argparse.SUPPRESS, dest="search_weights", help="w_sim,w_range,w_label")
    q.add_argument("--evidence", nargs="*", help="fields to attach from the catalog")

    q = leaf(sub, "select", cmd_select, "choose a weighted working set")
    q.add_argument("--dataset", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--budget", type=int, required=True)
    q.add_argument("--metric", default="accuracy")
    q.add_argument("--slice-key", action="append", default=[])

    q = leaf(sub, "features", cmd_features, "build a feature view and select features by CMI")
    q.add_argument("--dataset", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--fields", nargs="*", help="candidate fields (default: all tabular fields)")
    q.add_argument("--k", type=int, help="max features to keep")

    mdl = sub.add_parser("model", help="training and versioning")
    msub = mdl.add_subparsers(dest="sub", metavar="SUBCOMMAND", parser_class=_Parser, required=True)
    q = leaf(msub, "train", cmd_model_train, "train on the working set and commit")
    q.add_argument("--dataset", required=True)
    q.add_argument("--target")
    q.add_argument("--learner", default="regularized-logistic")
    q.add_argument("--zoo", action="store_true", help="try every learner, keep the best")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--max-seconds", type=float, default=60.0)
    q.add_argument("--branch", default="main")
    q = leaf(msub, "commit", cmd_model_commit, "commit raw artifacts to a branch")
    q.add_argument("--branch", default="main")
    q.add_argument("--put", action="append", default=[], help="kind/name=path")
    q.add_argument("--delete", action="append", default=[], help="kind/name")
    q.add_argument("--meta", action="append", default=[], help="key=value")
    q.add_argument("--message")
    q = leaf(msub, "branch", cmd_model_branch, "create a branch")
    q.add_argument("name")
    q.add_argument("--from", dest="from_version", help="version or branch (default: empty)")
    q = leaf(msub, "merge", cmd_model_merge, "three-way merge branch B into branch A")
    q.add_argument("a")
    q.add_argument("b")
    q.add_argument("--policy", default="prefer-a")
    q.add_argument("--metric")
    q.add_argument("--note")
    q = leaf(msub, "log", cmd_model_log, "ancestry of a branch or version")
    q.add_argument("ref")
    q = leaf(msub, "resolve", cmd_model_resolve, "newest snapshot compatible with a task")
    q.add_argument("--objective")
    q.add_argument("--metric")
    q.add_argument("--dataset", help="take the schema from this dataset")
    q.add_argument("--schema", help="JSON object field -> kind, or @file")

    drf = sub.add_parser("drift", help="drift monitoring")
    dsub = drf.add_subparsers(dest="sub", metavar="SUBCOMMAND", parser_class=_Parser, required=True)
    q = leaf(dsub, "watch", cmd_drift_watch, "stream observations through a monitor")
    q.add_argument("--model", required=True, help="model version")
    q.add_argument("--observations", help="JSONL with features, score, label, ref")
    q.add_argument("--dataset", help="score this dataset with the model instead")
    q.add_argument("--slice", action="append", default=[], help="field=value")
    q.add_argument("--metric", action="append", default=[], help="monitored metric (default auc)")
    q.add_argument("--window", type=int)

    tsk = sub.add_parser("task", help="declarative tasks")
    tsub = tsk.add_subparsers(dest="sub", metavar="SUBCOMMAND", parser_class=_Parser, required=True)
    q = leaf(tsub, "run", cmd_task_run, "plan and execute a request")
    q.add_argument("--request", required=True)
    q.add_argument("--explain", action="store_true", help="print the plan and rewrite log")
    q.add_argument("--dry-run", action="store_true", help="plan only")
    return p


_CONFIG_FLAGS = ("data_dir", "workers", "index_max_degree", "index_ef_construction", "index_metric", "search_weights")


def _error(exc: BaseException, code: int) -> int:
    msg = " | ".join(line.strip() for line in str(exc).splitlines() if line.strip()) or type(exc).__name__
    print(json.dumps({"error": type(exc).__name__, "message": msg, "exit": code}), file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        if args.cmd is None:
            parser.print_usage(sys.stderr)
            raise UsageError("missing command")
        args.json = getattr(args, "json", False)
        cfg = load_config(getattr(args, "config", None),
                          overrides={k: getattr(args, k, None) for k in _CONFIG_FLAGS})
        args.fn(Engine(cfg), args)
        return 0
    except UserError as exc:
        return _error(exc, 1)
    except KeyboardInterrupt:
        return _error(UserError("interrupted"), 1)
    except Exception as exc:  # noqa: BLE001  anything else is our bug
        return _error(exc, 2)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

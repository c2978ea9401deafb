import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aixel.catalog import Catalog, DatasetDescriptor, Field, FieldKind, Record
from aixel.errors import UserError
from aixel.features import build_view
from aixel.metrics import ece
from aixel.selection import Member, SelectionSpec, WorkingSet, select
from aixel.store import ArtifactKind, ModelStore
from aixel import trainer
from aixel.synth import separable_dataset
from aixel.trainer import Calibration, TrainerSpec, fit_calibration


def _catalog(X, y, ds="d"):
    cat = Catalog()
    cat.register_dataset(DatasetDescriptor(ds, [Field("x1", FieldKind.NUMERIC), Field("x2", FieldKind.NUMERIC),
                                                Field("y", FieldKind.NUMERIC)]))
    cat.ingest(ds, [Record(f"r{i}", {"x1": float(X[i, 0]), "x2": float(X[i, 1]), "y": float(y[i])}) for i in range(len(y))])
    return cat


def _ws(cat, ds="d", budget=10_000):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return select(list(cat.records(ds)), SelectionSpec("y", budget))


@pytest.fixture()
def sep():
    X, y = separable_dataset(300)
    cat = _catalog(X, y)
    recs = list(cat.records("d"))
    return cat, _ws(cat), build_view(recs, {"x1": "numeric", "x2": "numeric"})


def test_separable_reaches_perfect_train_accuracy(sep, tmp_path):
    cat, ws, view = sep
    tm = trainer.train(cat, "d", ws, view, "y", store=ModelStore(tmp_path))
    assert tm.train_metrics["accuracy"] == 1.0
    snap = tm.snapshot
    names = {(k.value, n) for k, n in snap.manifest}
    assert names == {("model", "params"), ("model", "calibration"), ("tensor", "features"), ("metadata", "view"),
                     ("index", "keys")}
    assert snap.metadata["eval"] == tm.evals and "auc" in tm.evals
    assert snap.metadata["compat"]["objective"] == "classify"


def test_evals_use_val_segment_only(sep):
    cat, ws, view = sep
    tm = trainer.train(cat, "d", ws, view, "y")
    val = [m.record_id for m in ws.members if m.segment == "val"]
    recs = [cat.get("d", r) for r in val]
    p = tm.model.predict(view.apply(recs))
    y = np.array([r.values["y"] for r in recs])
    assert tm.evals["accuracy"] == pytest.approx(float(np.mean((p >= 0.5) == y)))


@pytest.mark.parametrize("learner", sorted(trainer.LEARNERS))
def test_training_is_deterministic(sep, learner, tmp_path):
    cat, ws, view = sep
    a = trainer.train(cat, "d", ws, view, "y", TrainerSpec(learner, seed=3))
    b = trainer.train(cat, "d", ws, view, "y", TrainerSpec(learner, seed=3))
    assert a.params_hash == b.params_hash


def test_chunked_fit_equals_single_run(sep):
    cat, ws, view = sep
    from aixel import learners
    X, y, w = trainer._segment_data(cat, "d", ws, view, "y", "train")
    whole = learners.Logistic().fit(X, y, w)
    tm = trainer.train(cat, "d", ws, view, "y")
    np.testing.assert_allclose(tm.model.coef, whole.coef, rtol=1e-10)
    assert tm.model.epochs == whole.epochs


def test_errors_for_empty_train_and_degenerate_target(sep):
    cat, ws, view = sep
    empty = WorkingSet([Member(m.record_id, m.weight, "val") for m in ws.members], ws.spec_hash)
    with pytest.raises(UserError, match="train segment is empty"):
        trainer.train(cat, "d", empty, view, "y")
    X = np.random.default_rng(0).normal(size=(50, 2))
    cat2 = _catalog(X, np.ones(50))
    with pytest.raises(UserError, match="degenerate"):
        trainer.train(cat2, "d", _ws(cat2), build_view(list(cat2.records("d")), {"x1": "numeric"}), "y")
    with pytest.raises(UserError):
        TrainerSpec("deep-net")
    with pytest.raises(UserError):
        TrainerSpec(max_seconds=0)


def test_time_cap_returns_best_so_far(sep):
    cat, ws, view = sep
    tm = trainer.train(cat, "d", ws, view, "y", TrainerSpec("decision-stump-ensemble", max_seconds=1e-9))
    assert tm.capped and len(tm.model.stumps) == trainer.CHUNK
    with pytest.raises(trainer.ResourceCapError):
        trainer.train(cat, "d", ws, view, "y", TrainerSpec(max_memory_mb=1e-6))


# -- calibration --------------------------------------------------------------------

def _calibrated_window(levels=20, per=200):
    s, y = [], []
    for j in range(levels):
        p = (j + 0.5) / levels
        s += [p] * per
        pos = round(p * per)  # exact: (j + .5) * per / levels is an integer
        y += [1] * pos + [0] * (per - pos)
    return np.array(s), np.array(y, float)


def test_perfectly_calibrated_window_gives_identity():
    s, y = _calibrated_window()
    cal = fit_calibration(s, y)
    grid = np.linspace(s.min(), s.max(), 101)
    assert np.max(np.abs(cal(grid) - grid)) < 1e-6


def test_overconfident_scores_improve():
    rng = np.random.default_rng(0)
    true_p = rng.uniform(0.2, 0.8, 2000)
    y = (rng.random(2000) < true_p).astype(float)
    raw = 1 / (1 + np.exp(-3 * np.log(true_p / (1 - true_p))))  # pushed toward 0 and 1
    cal = fit_calibration(raw, y)
    assert ece(y, cal(raw)) < ece(y, raw)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=5, max_size=300))
def test_calibration_map_is_monotone(pairs):
    s, y = zip(*pairs)
    cal = fit_calibration(s, y)
    assert cal.monotone
    grid = np.linspace(-0.1, 1.1, 50)
    assert np.all(np.diff(cal(grid)) >= -1e-12)


def test_recalibrate_changes_exactly_one_entry(sep, tmp_path):
    cat, ws, view = sep
    store = ModelStore(tmp_path)
    tm = trainer.train(cat, "d", ws, view, "y", store=store)
    rng = np.random.default_rng(1)
    true_p = rng.uniform(0.1, 0.9, 500)
    y = (rng.random(500) < true_p).astype(float)
    raw = 1 / (1 + np.exp(-4 * np.log(true_p / (1 - true_p))))
    snap = trainer.recalibrate(store, tm.snapshot.version, raw, y)
    parent = tm.snapshot.manifest
    diff = {k for k in set(parent) | set(snap.manifest) if parent.get(k) != snap.manifest.get(k)}
    assert diff == {(ArtifactKind.MODEL, "calibration")}
    assert snap.metadata["ece_after"] <= snap.metadata["ece_before"]
    assert snap.parents == (tm.snapshot.version,)
    with pytest.raises(UserError, match="insufficient labels"):
        trainer.recalibrate(store, snap.version, raw[:10], y[:10])


# -- finetune -----------------------------------------------------------------------

def _two_batches():
    X, y = separable_dataset(600, seed=5)
    cat = _catalog(X, y)
    recs = list(cat.records("d"))
    view = build_view(recs[:300], {"x1": "numeric", "x2": "numeric"})
    ws_all = _ws(cat)
    first = WorkingSet([m for m in ws_all.members if int(m.record_id[1:]) < 300], ws_all.spec_hash)
    delta = WorkingSet([m for m in ws_all.members if int(m.record_id[1:]) >= 300], ws_all.spec_hash)
    return cat, view, first, delta


def test_finetune_zero_steps_only_metadata_changes(tmp_path):
    cat, view, first, delta = _two_batches()
    store = ModelStore(tmp_path)
    tm = trainer.train(cat, "d", first, view, "y", store=store)
    snap = trainer.finetune(store, tm.snapshot.version, cat, "d", delta, view.to_manifest(), 0)
    assert snap.manifest == tm.snapshot.manifest and snap.version != tm.snapshot.version
    assert snap.metadata["op"] == "finetune"


def test_finetune_same_distribution_stays_close(tmp_path):
    cat, view, first, delta = _two_batches()
    store = ModelStore(tmp_path)
    tm = trainer.train(cat, "d", first, view, "y", TrainerSpec("regularized-logistic"), store=store)
    snap = trainer.finetune(store, tm.snapshot.version, cat, "d", delta, view.to_manifest(), 50)
    assert abs(snap.metadata["eval"]["auc"] - tm.evals["auc"]) < 0.05
    changed = {k for k in snap.manifest if snap.manifest[k] != tm.snapshot.manifest[k]}
    assert changed == {(ArtifactKind.MODEL, "params")}
    # warm start: parameters move but stay near the parent's
    new = json.loads(store.read(snap.version, ArtifactKind.MODEL, "params"))
    assert np.allclose(new["coef"], tm.model.coef, atol=0.5) and new["coef"] != tm.model.coef.tolist()


@pytest.mark.parametrize("learner", ["regularized-linear", "decision-stump-ensemble"])
def test_finetune_other_learners(tmp_path, learner):
    cat, view, first, delta = _two_batches()
    store = ModelStore(tmp_path)
    tm = trainer.train(cat, "d", first, view, "y", TrainerSpec(learner), store=store)
    snap = trainer.finetune(store, tm.snapshot.version, cat, "d", delta, view.to_manifest(), 10)
    loaded = trainer.load(store, snap.version)
    assert loaded.learner == learner and loaded.params_hash != tm.params_hash


def test_finetune_manifest_mismatch(tmp_path):
    cat, view, first, delta = _two_batches()
    store = ModelStore(tmp_path)
    tm = trainer.train(cat, "d", first, view, "y", store=store)
    other = build_view(list(cat.records("d")), {"x1": "numeric"})
    with pytest.raises(UserError, match="full retrain"):
        trainer.finetune(store, tm.snapshot.version, cat, "d", delta, other.to_manifest(), 10)


def test_zoo_picks_best_val_metric(sep, tmp_path):
    cat, ws, view = sep
    store = ModelStore(tmp_path)
    best = trainer.zoo(cat, "d", ws, view, "y", store=store)
    scores = {name: trainer.train(cat, "d", ws, view, "y", TrainerSpec(name)).evals["auc"] for name in trainer.LEARNERS}
    assert best.evals["auc"] == max(scores.values()) and best.snapshot is not None

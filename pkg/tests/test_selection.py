import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aixel.catalog import Catalog, DatasetDescriptor, Field, FieldKind, Record
from aixel.errors import UserError
from aixel.selection import (
    SelectionSpec,
    WorkingSet,
    refresh,
    refresh_dataset,
    score_records,
    select,
    select_dataset,
)

FIELDS = ["x", "y", "region", "user"]


def rec(i, x=1.0, y=0, region="a", user=None, ts=None):
    return Record(f"r{i:03d}", {"x": x, "y": y, "region": region, "user": user if user is not None else f"u{i}"}, timestamp=ts)


def test_spec_validation():
    with pytest.raises(UserError):
        SelectionSpec("y", 0)
    with pytest.raises(UserError):
        SelectionSpec("y", 5, fractions=(0.5, 0.5, 0.1))
    with pytest.raises(UserError):
        SelectionSpec("y", 5, dedup_threshold=1.5)


def test_unknown_field():
    with pytest.raises(UserError, match="unknown field"):
        score_records([rec(0)], SelectionSpec("nope", 3), FIELDS)


def test_fully_null_record_has_zero_wellformed_component():
    recs = [rec(0), Record("null", {f: None for f in FIELDS})]
    u = score_records(recs, SelectionSpec("y", 5), FIELDS)
    # diversity 1, slice boost 1, wellformed 0
    assert u["null"] == pytest.approx(0.3 + 0.3)
    assert u["r000"] == pytest.approx(1.0)
    with pytest.warns(UserWarning):
        ws = select(recs, SelectionSpec("y", 5), FIELDS)
    assert ws.ids() == ["r000"]


def test_exact_duplicate_of_selected_scores_zero():
    a = rec(0, x=3.0, user="same")
    b = Record("r001", dict(a.values))
    u = score_records([a, b], SelectionSpec("y", 5), FIELDS, selected=["r000"])
    assert u["r001"] == 0.0 and u["r000"] > 0


def test_exhausted_slice_gives_other_slice_higher_boost():
    recs = [rec(i, region="a") for i in range(6)] + [rec(10 + i, region="b") for i in range(6)]
    spec = SelectionSpec("y", 6, slice_keys=["region"])
    # quota = 6 / 2 slices = 3; slice a is past its quota, b is empty
    chosen_a = [r.record_id for r in recs[:4]]
    u = score_records(recs, spec, FIELDS, selected=chosen_a)
    fill_a, fill_b = 4 / 3, 0 / 3
    assert u["r010"] - u["r004"] == pytest.approx(0.3 * (1 / (1 + fill_b) - 1 / (1 + fill_a)))
    assert u["r010"] > u["r004"]


def test_budget_above_rows_selects_all_with_warning():
    recs = [rec(i, x=float(i)) for i in range(10)]
    with pytest.warns(UserWarning) as caught:
        ws = select(recs, SelectionSpec("y", 50), FIELDS)
    msgs = [str(w.message) for w in caught]
    assert any("selecting every eligible row" in m for m in msgs) and any("shortfall: 10 of 50" in m for m in msgs)
    assert len(ws.members) == 10


def test_duplicates_reduce_selection_with_shortfall_warning():
    base = [rec(i, x=float(i)) for i in range(50)]
    dups = [Record(f"d{i:03d}", dict(base[i].values)) for i in range(50)]
    recs = base + dups
    distinct = len({r.content_hash() for r in recs})
    with pytest.warns(UserWarning, match="shortfall"):
        ws = select(recs, SelectionSpec("y", 60), FIELDS)
    assert len(ws.members) <= distinct == 50
    assert len({m.content_hash for m in ws.members}) == len(ws.members)


def test_near_duplicate_vectors_are_down_weighted():
    recs = [
        Record("a", {"v": [1.0, 0.0, 0.0], "y": 1}),
        Record("b", {"v": [1.0, 0.001, 0.0], "y": 1}),
        Record("c", {"v": [0.0, 1.0, 0.0], "y": 0}),
    ]
    ws = select(recs, SelectionSpec("y", 2, dedup_threshold=0.9), ["v", "y"], vector_field="v")
    assert ws.ids() == ["a", "c"]
    with pytest.warns(UserWarning, match="selecting every eligible row"):
        full = select(recs, SelectionSpec("y", 3, dedup_threshold=0.9), ["v", "y"], vector_field="v")
    w = {m.record_id: m.weight for m in full.members}
    assert w["b"] < w["c"] <= w["a"]


def test_entity_records_share_a_segment():
    recs = [rec(i, x=float(i), user="e" if i < 5 else None) for i in range(40)]
    with pytest.warns(UserWarning, match="selecting every eligible row"):
        ws = select(recs, SelectionSpec("y", 40, entity_key="user"), FIELDS)
    segs = {m.segment for m in ws.members if m.record_id < "r005"}
    assert len(segs) == 1


def test_serve_segment_is_latest_time_window():
    recs = [rec(i, x=float(i), ts=1000 * i) for i in range(100)]
    with pytest.warns(UserWarning, match="selecting every eligible row"):
        ws = select(recs, SelectionSpec("y", 100, fractions=(0.6, 0.2, 0.2)), FIELDS)
    ts = {r.record_id: r.timestamp for r in recs}
    serve = [ts[i] for i in ws.ids("serve")]
    rest = [ts[i] for i in ws.ids() if i not in set(ws.ids("serve"))]
    assert len(serve) == 20 and min(serve) > max(rest)
    assert ws.serve_from == min(serve)
    assert ws.ids("train") and ws.ids("val")


def test_determinism_and_manifest_roundtrip(tmp_path):
    recs = [rec(i, x=float(i % 7), region="ab"[i % 2], ts=i) for i in range(60)]
    spec = SelectionSpec("y", 30, slice_keys=["region"], entity_key="user", seed=4)
    a, b = select(recs, spec, FIELDS), select(list(reversed(recs)), spec, FIELDS)
    assert a.to_manifest() == b.to_manifest()
    a.save(tmp_path / "m.json")
    back = WorkingSet.load(tmp_path / "m.json")
    assert back.manifest_id == a.manifest_id and back.members == a.members


def test_slice_coverage_balances_selection():
    recs = [rec(i, x=float(i), region="a") for i in range(90)] + [rec(100 + i, x=float(i), region="b") for i in range(10)]
    ws = select(recs, SelectionSpec("y", 20, slice_keys=["region"]), FIELDS)
    n_b = sum(1 for i in ws.ids() if i >= "r100")
    assert n_b == 10  # the minority slice is fully covered before the majority fills the budget


entity_rows = st.lists(st.tuples(st.integers(0, 8), st.integers(0, 3), st.booleans()), min_size=1, max_size=50)


@settings(max_examples=40, deadline=None)
@given(entity_rows, st.integers(1, 60), st.booleans())
def test_leakage_freedom_and_budget(rows, budget, timed):
    recs = [rec(i, x=float(v), user=f"e{e}", ts=(1000 * i if timed else None), y=int(flag)) for i, (e, v, flag) in enumerate(rows)]
    spec = SelectionSpec("y", budget, entity_key="user")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ws = select(recs, spec, FIELDS)
    assert len(ws.members) <= budget
    users = {r.record_id: r.values["user"] for r in recs}
    seg_of = {}
    for m in ws.members:
        assert seg_of.setdefault(users[m.record_id], m.segment) == m.segment
    assert all(0 < m.weight <= 1 for m in ws.members)


def _base(n=40, ts=True):
    return [rec(i, x=float(i), y=None if i % 2 else 1, ts=(1000 * i if ts else None)) for i in range(n)]


def test_refresh_empty_delta_is_identity_with_version_bump():
    recs = _base()
    spec = SelectionSpec("y", 30)
    ws = select(recs, spec, FIELDS)
    again = refresh(ws, recs, [], spec, FIELDS)
    assert again.members == ws.members and again.version == ws.version + 1
    assert again.manifest_id != ws.manifest_id


def test_refresh_spec_mismatch():
    recs = _base()
    ws = select(recs, SelectionSpec("y", 30), FIELDS)
    with pytest.raises(UserError, match="spec hash mismatch"):
        refresh(ws, recs, [], SelectionSpec("y", 31), FIELDS)


def test_refresh_displaces_lowest_utility_members_only():
    recs = _base(ts=False)
    spec = SelectionSpec("y", 30)
    ws = select(recs, spec, FIELDS)
    before = {m.record_id: m for m in ws.members}
    delta = [rec(200 + i, x=float(i), y=1) for i in range(8)]  # fully formed: higher utility
    new = refresh(ws, recs + delta, delta, spec, FIELDS)
    after = {m.record_id: m for m in new.members}
    assert len(new.members) == 30
    gone = set(before) - set(after)
    added = set(after) - set(before)
    assert gone and added <= {r.record_id for r in delta}
    for g in gone:
        seg = before[g].segment
        stayed = [before[r].weight for r in before if r in after and before[r].segment == seg]
        assert all(before[g].weight <= w for w in stayed)
        assert any(after[a].segment == seg and after[a].weight > before[g].weight for a in added)
    for r in set(before) & set(after):
        assert before[r].segment == after[r].segment


def test_refresh_in_serve_window_keeps_train_val():
    recs = _base()
    spec = SelectionSpec("y", 40)
    with pytest.warns(UserWarning, match="selecting every eligible row"):
        ws = select(recs, spec, FIELDS)
    delta = [rec(500 + i, x=float(i), y=1, ts=10_000_000 + i) for i in range(5)]
    new = refresh(ws, recs + delta, delta, spec, FIELDS)
    for seg in ("train", "val"):
        assert new.ids(seg) == ws.ids(seg)
    assert set(new.ids("serve")) & {r.record_id for r in delta}


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 39), max_size=10, unique=True), st.integers(0, 3))
def test_refresh_stability_for_unchanged_records(changed, seed):
    recs = _base(ts=False)
    spec = SelectionSpec("y", 25, seed=seed)
    ws = select(recs, spec, FIELDS)
    by_id = {r.record_id: r for r in recs}
    delta = [Record(f"r{i:03d}", {**by_id[f"r{i:03d}"].values, "x": -1.0 - i}) for i in changed]
    delta_ids = {r.record_id for r in delta}
    new = refresh(ws, recs, delta, spec, FIELDS)
    old_seg = ws.segment_of()
    for m in new.members:
        if m.record_id in old_seg and m.record_id not in delta_ids:
            assert m.segment == old_seg[m.record_id]
    assert len(new.members) <= 25


def test_catalog_adapters():
    cat = Catalog()
    cat.register_dataset(DatasetDescriptor("d", [Field("x", FieldKind.NUMERIC), Field("y", FieldKind.CATEGORICAL),
                                                 Field("emb", FieldKind.VECTOR, 3)]))
    rng = np.random.default_rng(0)
    cat.ingest("d", [Record(f"r{i}", {"x": float(i), "y": "ab"[i % 2], "emb": rng.normal(size=3).tolist()}, timestamp=i)
                     for i in range(30)])
    spec = SelectionSpec("y", 20)
    ws = select_dataset(cat, "d", spec)
    assert len(ws.members) == 20 and ws.source_snapshot == cat.snapshot_id("d")
    cat.ingest("d", [Record("new", {"x": 1.0, "y": "a", "emb": [1.0, 2.0, 3.0]}, timestamp=999)])
    ws2 = refresh_dataset(ws, cat, "d", spec, ["new"])
    assert ws2.version == 2 and ws2.source_snapshot == cat.snapshot_id("d") != ws.source_snapshot

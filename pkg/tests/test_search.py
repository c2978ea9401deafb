import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aixel.catalog import Catalog, DatasetDescriptor, Field, FieldKind, Record
from aixel.dataset_index import DatasetIndex
from aixel.errors import UserError
from aixel.fusion_index import FusionIndex, IndexNode, IndexParams, PartitionedIndex
from aixel.search import (
    Candidate,
    ConstraintProfile,
    Filter,
    RankWeights,
    brute_force,
    derive_profile,
    evidence,
    label_coverage,
    range_fit,
    recall,
    search,
    search_then_filter,
)
from aixel.synth import clustered_nodes, queries_near


@pytest.fixture(scope="module")
def clustered():
    nodes, centers = clustered_nodes(1500, dim=16, seed=21)
    idx = FusionIndex(16, IndexParams(seed=1))
    idx.build(nodes)
    return idx, nodes, centers


def test_range_fit_examples():
    assert range_fit(50, (0, 100)) == 1.0
    assert range_fit(0, (0, 100)) == 0.0
    assert range_fit(25, (0, 100)) == 0.5
    assert range_fit(7, None) == 1.0
    assert range_fit(3, (3, 3)) == 1.0


def test_label_coverage_examples():
    p = ConstraintProfile(labels={"a", "b", "c", "d"})
    assert label_coverage({"a", "b", "x"}, p) == 0.5
    assert label_coverage(set(), ConstraintProfile()) == 1.0


def test_weights_validation_and_parse():
    assert RankWeights.parse("0.5,0.25,0.25") == RankWeights(0.5, 0.25, 0.25)
    with pytest.raises(UserError):
        RankWeights(0.5, 0.5, 0.5)
    with pytest.raises(UserError):
        RankWeights.parse("1,0")


def test_derive_profile_intersects_ranges_and_unions_labels():
    p = derive_profile(
        [Filter("price", ">=", 10), {"field": "price", "op": "<=", "value": 50}, Filter("price", "between", (0, 40)),
         Filter("tags", "any", ["a"]), Filter("tags", "in", "b")],
        attr_field="price",
        label_field="tags",
    )
    assert p.range == (10.0, 40.0)
    assert p.labels == {"a", "b"} and p.label_mode == "any"
    assert not p.unsatisfiable


def test_derive_profile_contradiction_and_errors():
    p = derive_profile([Filter("x", ">", 5), Filter("x", "<", 3)])
    assert p.unsatisfiable and "contradictory" in p.reason
    with pytest.raises(UserError, match="operator"):
        derive_profile([Filter("x", "~", 1)])
    with pytest.raises(UserError, match="indexed attribute"):
        derive_profile([Filter("y", ">", 1)], attr_field="x")
    with pytest.raises(UserError):
        derive_profile([Filter("t", "any", "a"), Filter("t", "all", "b")])
    strict = derive_profile([Filter("x", ">", 5)])
    assert strict.range[0] > 5


def test_hand_computed_three_nodes():
    # cosine similarity s = (1 + cos) / 2
    idx = FusionIndex(2)
    idx.build([
        IndexNode(0, [1, 0], 10.0, ["a"]),
        IndexNode(1, [0, 1], 50.0, ["a", "b"]),
        IndexNode(2, [-1, 0], 90.0, ["b"]),
    ])
    prof = ConstraintProfile((0, 100), {"a", "b"})
    res = search(idx, [1, 0], 3, prof)
    got = {c.node_id: c for c in res}
    # node 0: sim 1, fit 0.2, cov 0.5
    assert got[0].score == pytest.approx(0.7 * 1.0 + 0.15 * 0.2 + 0.15 * 0.5)
    # node 1: sim 0.5, fit 1, cov 1
    assert got[1].score == pytest.approx(0.7 * 0.5 + 0.15 + 0.15)
    # node 2: sim 0, fit 0.2, cov 0.5
    assert got[2].score == pytest.approx(0.15 * 0.2 + 0.15 * 0.5)
    assert res.ids() == [0, 1, 2]
    assert search(idx, [1, 0], 3, ConstraintProfile((40, 100), {"a", "b"}, "all")).ids() == [1]


def test_ties_broken_by_node_id():
    idx = FusionIndex(2)
    idx.build([IndexNode(i, [1, 1], 5.0) for i in (4, 2, 9)])
    assert search(idx, [1, 1], 3).ids() == [2, 4, 9]


def test_argument_errors(clustered):
    idx = clustered[0]
    q = np.ones(16)
    with pytest.raises(UserError):
        search(idx, q, 0)
    with pytest.raises(UserError):
        search(idx, q, 10, ef_search=5)
    with pytest.raises(UserError, match="dimension"):
        search(idx, np.ones(3), 5)


def test_unsatisfiable_diagnostics(clustered):
    idx = clustered[0]
    q = np.ones(16)
    r = search(idx, q, 5, ConstraintProfile((1000, 2000)))
    assert r.candidates == [] and "range excludes" in r.diagnostic
    r = search(idx, q, 5, ConstraintProfile(labels={"never-seen"}, label_mode="all"))
    assert r.candidates == [] and r.diagnostic.startswith("unsatisfiable")
    r = search(idx, q, 5, derive_profile([Filter("x", ">", 5), Filter("x", "<", 3)]))
    assert r.candidates == [] and "contradictory" in r.diagnostic


@pytest.mark.parametrize("prof", [
    ConstraintProfile((20, 40)),
    ConstraintProfile(labels={"l3"}),
    ConstraintProfile((10, 70), {"l1", "l5"}, "all"),
    ConstraintProfile((30, 90), {"l0", "l2"}, relaxation_budget=2),
])
def test_soundness_and_recall(clustered, prof):
    idx, nodes, centers = clustered
    by_id = {n.node_id: n for n in nodes}
    recs = []
    for q in queries_near(centers, 25, seed=3):
        res = search(idx, q, 10, prof, ef_search=128)
        for c in res:
            n = by_id[c.node_id]
            assert prof.admits(n.attr, set(n.labels))
        recs.append(recall(res.ids(), brute_force(idx, q, 10, prof).ids()))
    assert np.mean(recs) >= 0.9


def test_fused_score_recomputes_from_components(clustered):
    idx, _, centers = clustered
    w = RankWeights(0.5, 0.3, 0.2)
    res = search(idx, centers[0], 10, ConstraintProfile((0, 60), {"l1", "l2"}), w)
    for c in res:
        assert c.score == pytest.approx(0.5 * c.sim + 0.3 * c.range_fit + 0.2 * c.label_cov, abs=1e-12)
    scores = [c.score for c in res]
    assert scores == sorted(scores, reverse=True)


def test_constrained_visits_below_baseline(clustered):
    idx, _, centers = clustered
    prof = ConstraintProfile((0, 10))
    ours = base = 0
    for q in queries_near(centers, 20, seed=4):
        ours += search(idx, q, 10, prof, ef_search=64).visited
        base += search_then_filter(idx, q, 10, prof, ef_search=64).visited
    assert ours < base


_SMALL = {}


def _small():
    if not _SMALL:
        nodes, centers = clustered_nodes(200, dim=8, seed=5)
        idx = FusionIndex(8)
        idx.build(nodes)
        _SMALL.update(idx=idx, nodes=nodes, centers=centers)
    return _SMALL["idx"], _SMALL["nodes"], _SMALL["centers"]


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 30), st.integers(0, 50))
def test_enlarging_profile_is_monotone(lo, hi, grow, qseed):
    idx, nodes, centers = _small()
    lo, hi = min(lo, hi), max(lo, hi)
    narrow = ConstraintProfile((lo, hi), {"l1"})
    wide = ConstraintProfile((lo - grow, hi + grow), {"l1", "l2"})
    q = queries_near(centers, 1, seed=qseed)[0]
    assert len(brute_force(idx, q, 500, wide)) >= len(brute_force(idx, q, 500, narrow))
    for prof in (narrow, wide):
        res = search(idx, q, 10, prof, ef_search=128)
        assert all(prof.admits(nodes[c.node_id].attr, nodes[c.node_id].labels) for c in res)
        # narrow results are admissible under the enlarged profile as well
        assert all(wide.admits(nodes[c.node_id].attr, nodes[c.node_id].labels) for c in res)


def test_unconstrained_sim_only_equals_plain_ann(clustered):
    idx, _, centers = clustered
    for q in queries_near(centers, 10, seed=9):
        pq = idx.prepare(q)
        ep, d = idx.descend(pq)
        plain = [nid for _, nid, _ in idx.search_layer(pq, [(d, ep)], 128, 0)[:10]]
        got = search(idx, q, 10, weights=RankWeights(1.0, 0.0, 0.0), ef_search=128).ids()
        assert set(got) == set(plain)


@pytest.mark.parametrize("prof", [ConstraintProfile((5, 25)), ConstraintProfile((40, 60), {"l2", "l6"}, "all")])
def test_exhaustive_search_equals_oracle(prof):
    idx, _, centers = _small()
    exhaustive = ConstraintProfile(prof.range, prof.labels, prof.label_mode, relaxation_budget=len(idx))
    for q in queries_near(centers, 5, seed=2):
        got = search(idx, q, 10, exhaustive, ef_search=len(idx))
        assert got.ids() == brute_force(idx, q, 10, prof).ids()


def test_partition_fanout_matches_oracle():
    nodes, centers = clustered_nodes(600, dim=8, seed=13)
    pidx = PartitionedIndex(8)
    for n in nodes:
        pidx.insert(n, ("t", f"b{n.node_id % 3}"))
    prof = ConstraintProfile((25, 75), {"l1"})
    for q in queries_near(centers, 10, seed=6):
        serial = search(pidx, q, 10, prof, ef_search=128)
        parallel = search(pidx, q, 10, prof, ef_search=128, workers=3)
        assert serial.ids() == parallel.ids()
        truth = brute_force(nodes, q, 10, prof)
        assert recall(serial.ids(), truth.ids()) >= 0.9


def test_brute_force_on_node_list_matches_index_oracle(clustered):
    idx, nodes, centers = clustered
    prof = ConstraintProfile((10, 50), {"l4"})
    a = brute_force(idx, centers[2], 10, prof)
    b = brute_force(nodes, centers[2], 10, prof)
    assert a.ids() == b.ids()
    for x, y in zip(a, b):
        assert math.isclose(x.score, y.score, abs_tol=1e-9)


def _catalog_with_vectors():
    cat = Catalog()
    cat.register_dataset(DatasetDescriptor("items", [
        Field("emb", FieldKind.VECTOR, 4), Field("price", FieldKind.NUMERIC),
        Field("tags", FieldKind.LABEL_SET), Field("title", FieldKind.TEXT),
    ]))
    rng = np.random.default_rng(0)
    recs = [Record(f"item{i}", {"emb": rng.normal(size=4).tolist(), "price": float(i), "tags": [f"t{i % 3}"],
                                "title": f"thing {i}"}) for i in range(60)]
    recs.append(Record("novec", {"emb": None, "price": 1.0, "tags": [], "title": "x"}))
    cat.ingest("items", recs)
    return cat


def test_dataset_index_build_search_evidence(tmp_path):
    cat = _catalog_with_vectors()
    di, rep = DatasetIndex.build(cat, "items", "price", "tags")
    assert rep.node_count == 60 and rep.skipped == [("novec", "null vector")]
    res = di.search(np.ones(4), 5, ConstraintProfile((10, 30), {"t1"}))
    di.attach_evidence(res, cat, ["title", "price"])
    for c in res:
        assert 10 <= c.evidence["price"] <= 30
        assert c.evidence["title"] == f"thing {int(c.evidence['price'])}"
    di.save(tmp_path / "ix")
    again = DatasetIndex.load(tmp_path / "ix")
    assert again.search(np.ones(4), 5, ConstraintProfile((10, 30), {"t1"})).ids() == res.ids()


def test_evidence_for_tombstoned_record_is_empty_with_warning():
    cat = _catalog_with_vectors()
    di, _ = DatasetIndex.build(cat, "items", "price", "tags")
    cand = Candidate(0, 1.0, 1.0, 1.0, 1.0)
    cat.tombstone("items", di.record_of[0])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert evidence(cand, cat, "items", di.record_of[0], ["title"]) == {}
    assert caught and cand.evidence == {}

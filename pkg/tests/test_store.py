import hashlib
import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aixel import delta
from aixel.errors import CorruptionError, DuplicateError, UnknownIdError, UserError
from aixel.store import MAX_CHAIN, ArtifactKind, HeadMovedError, ModelStore, compatibility

T, M, META, IDX = ArtifactKind.TENSOR, ArtifactKind.MODEL, ArtifactKind.METADATA, ArtifactKind.INDEX


def mutate(data: bytes, rng: random.Random, n: int = 1024) -> bytes:
    b = bytearray(data)
    at = rng.randrange(len(b) - n)
    b[at : at + n] = rng.randbytes(n)
    return bytes(b)


@pytest.fixture
def store(tmp_path):
    return ModelStore(tmp_path / "store")


def test_zero_change_commit_keeps_refs(store):
    s1 = store.commit("main", {(T, "w"): b"abc", (META, "m"): b"{}"}, created=1)
    s2 = store.commit("main", {}, created=2)
    assert s2.manifest == s1.manifest and s2.parents == (s1.version,)
    assert store.head("main").version == s2.version


def test_identical_bytes_dedup(store):
    s = store.commit("main", {(T, "a"): b"same", (M, "b"): b"same"})
    assert s.manifest[(T, "a")] == s.manifest[(M, "b")]
    assert s.manifest[(T, "a")].hash == hashlib.sha256(b"same").hexdigest()


def test_megabyte_blob_with_small_change_stored_as_delta(store):
    rng = random.Random(0)
    w = rng.randbytes(1 << 20)
    store.commit("main", {(T, "w"): w})
    w2 = mutate(w, rng)
    s = store.commit("main", {(T, "w"): w2})
    ref = s.manifest[(T, "w")]
    stored = (store.root / "objects" / ref.hash[:2] / ref.hash).stat().st_size
    assert ref.encoding == "delta" and stored < 50_000
    assert store.reconstruct(ref) == w2


def test_delta_chain_depth_cap(store):
    rng = random.Random(1)
    versions = [rng.randbytes(64 * 1024)]
    store.commit("main", {(M, "net"): versions[0]})
    encodings = []
    for _ in range(MAX_CHAIN + 2):
        versions.append(mutate(versions[-1], rng, 256))
        s = store.commit("main", {(M, "net"): versions[-1]})
        encodings.append(s.manifest[(M, "net")].encoding)
    assert encodings[:MAX_CHAIN] == ["delta"] * MAX_CHAIN
    assert encodings[MAX_CHAIN] == "full"  # depth 9 would exceed the cap
    for snap, data in zip(reversed(store.log("main")), versions):
        assert store.read(snap.version, M, "net") == data


def test_small_or_metadata_blobs_stay_full(store):
    rng = random.Random(2)
    big = rng.randbytes(64 * 1024)
    store.commit("main", {(T, "small"): b"x" * 100, (META, "big"): big})
    s = store.commit("main", {(T, "small"): b"y" * 100, (META, "big"): mutate(big, rng)})
    assert s.manifest[(T, "small")].encoding == "full"
    assert s.manifest[(META, "big")].encoding == "full"


def test_corrupted_base_detected(store):
    rng = random.Random(3)
    w = rng.randbytes(64 * 1024)
    s1 = store.commit("main", {(T, "w"): w})
    s2 = store.commit("main", {(T, "w"): mutate(w, rng)})
    base = s1.manifest[(T, "w")]
    p = store.root / "objects" / base.hash[:2] / base.hash
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        store.reconstruct(s2.manifest[(T, "w")])
    assert store.verify()


def test_resolution(store):
    compat = compatibility({"x": "numeric", "y": "categorical"}, "classify", "accuracy")
    s1 = store.commit("main", {(M, "m"): b"1"}, {"compat": compat})
    ok_schema = {"x": "numeric", "y": "categorical", "extra": "text"}
    assert store.resolve({"objective": "classify"}, ok_schema).version == s1.version
    s2 = store.commit("main", {(M, "m"): b"2"})  # inherits compat
    assert store.resolve({"objective": "classify", "metric": "accuracy"}, ok_schema).version == s2.version
    with pytest.raises(UserError, match="missing field 'y'"):
        store.resolve({}, {"x": "numeric"})
    with pytest.raises(UserError, match="objective"):
        store.resolve({"objective": "regress"}, ok_schema)


def test_empty_store_resolution(store):
    with pytest.raises(UserError, match="empty"):
        store.resolve({}, {})


def test_branch_lineage_and_sharing(store):
    base = store.commit("main", {(T, "w"): b"w0", (M, "m"): b"m0"})
    store.branch(base.version, "exp")
    a = store.commit("exp", {(T, "w"): b"w1"})
    b = store.commit("main", {(M, "m"): b"m1"})
    assert a.parents == (base.version,) and base.version in store.ancestors(a.version)
    assert a.manifest[(M, "m")] == base.manifest[(M, "m")]
    assert b.manifest[(T, "w")] == base.manifest[(T, "w")]
    with pytest.raises(UnknownIdError):
        store.checkout("nope")
    with pytest.raises(DuplicateError):
        store.branch(base.version, "exp")
    with pytest.raises(UnknownIdError):
        store.branch("0" * 64, "other")
    assert store.checkout("exp").head == a.version


def _forked(store, created=0):
    root = store.commit("main", {(T, "w"): b"w0", (M, "m"): b"m0", (IDX, "i"): b"i0"},
                        {"compat": compatibility({"x": "numeric"}, "classify", "auc")}, created=created)
    store.branch(root.version, "b")
    return root


def test_disjoint_merge_has_no_conflicts(store):
    _forked(store)
    store.commit("main", {(T, "w"): b"w-a"})
    store.commit("b", {(M, "m"): b"m-b", (IDX, "i"): None})
    res = store.merge("main", "b")
    assert res.conflicts == []
    got = {k: store.reconstruct(v) for k, v in res.snapshot.manifest.items()}
    assert got == {(T, "w"): b"w-a", (M, "m"): b"m-b"}
    assert len(res.snapshot.parents) == 2
    # both inputs stay addressable
    for v in res.snapshot.parents:
        assert store.snapshot(v)


@pytest.mark.parametrize("policy,expect", [("prefer-a", b"a"), ("prefer-b", b"b")])
def test_conflict_record_per_artifact(store, policy, expect):
    _forked(store)
    store.commit("main", {(T, "w"): b"a"})
    store.commit("b", {(T, "w"): b"b"})
    res = store.merge("main", "b", policy)
    assert len(res.conflicts) == 1
    c = res.conflicts[0]
    assert (c.kind, c.name, c.policy) == ("tensor", "w", policy)
    assert store.read(res.snapshot.version, T, "w") == expect
    assert store.conflicts(res.snapshot.version) == res.conflicts


def test_prefer_higher_eval(store):
    _forked(store)
    store.commit("main", {(T, "w"): b"a"}, {"eval": {"auc": 0.81}})
    store.commit("b", {(T, "w"): b"b"}, {"eval": {"auc": 0.84}})
    res = store.merge("main", "b", "prefer-higher-eval")
    assert res.conflicts[0].chosen == "b" and store.read(res.snapshot.version, T, "w") == b"b"


def test_prefer_higher_eval_without_evals_falls_back(store):
    _forked(store)
    store.commit("main", {(T, "w"): b"a"})
    store.commit("b", {(T, "w"): b"b"})
    with pytest.warns(UserWarning, match="fell back"):
        res = store.merge("main", "b", "prefer-higher-eval")
    assert res.conflicts[0].policy == "prefer-a" and res.conflicts[0].chosen == "a"
    assert res.warnings


def test_merge_without_common_ancestor(store):
    store.commit("main", {(T, "w"): b"1"})
    store.branch(None, "orphan")
    store.commit("orphan", {(T, "w"): b"2"})
    with pytest.raises(UserError, match="no ancestor"):
        store.merge("main", "orphan")


def _scripted(root):
    s = ModelStore(root)
    _forked(s, created=100)
    s.commit("main", {(T, "w"): b"a"}, created=200)
    s.commit("b", {(T, "w"): b"b", (M, "m"): b"mb"}, created=300)
    return s.merge("main", "b", "prefer-b").snapshot.version


def test_merge_determinism_across_runs(tmp_path):
    assert _scripted(tmp_path / "one") == _scripted(tmp_path / "two")


def test_optimistic_head_check(store):
    s1 = store.commit("main", {(T, "w"): b"1"})
    store.commit("main", {(T, "w"): b"2"})
    with pytest.raises(HeadMovedError):
        store.commit("main", {(T, "w"): b"3"}, expected_head=s1.version)


def test_reopen_is_immutable(store):
    rng = random.Random(5)
    w = rng.randbytes(40_000)
    s1 = store.commit("main", {(T, "w"): w})
    s2 = store.commit("main", {(T, "w"): mutate(w, rng)})
    again = ModelStore(store.root)
    for s in (s1, s2):
        assert again.snapshot(s.version) == s
        assert again.read(s.version, T, "w") == store.read(s.version, T, "w")
    assert again.verify() == []


@settings(max_examples=40, deadline=None)
@given(st.binary(max_size=3000), st.binary(max_size=3000), st.integers(1, 512))
def test_delta_roundtrip(base, target, block):
    assert delta.apply(base, delta.diff(base, target, block)) == target


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 3))
def test_delta_roundtrip_shifted_edits(seed, edits):
    rng = random.Random(seed)
    base = rng.randbytes(200_000)
    t = bytearray(base)
    for _ in range(edits):
        at = rng.randrange(len(t))
        if rng.random() < 0.5:
            t[at:at] = rng.randbytes(rng.randrange(1, 50))
        else:
            del t[at : at + rng.randrange(1, 50)]
    d = delta.diff(base, bytes(t))
    # each edit costs at most about two unmatched blocks of literals
    assert delta.apply(base, d) == bytes(t) and len(d) < edits * (2 * delta.BLOCK + 100) + delta.BLOCK


ops = st.lists(st.tuples(st.sampled_from(["commit", "branch", "merge"]), st.integers(0, 3), st.integers(0, 5)),
               min_size=1, max_size=12)


@settings(max_examples=25, deadline=None)
@given(ops)
def test_random_histories_keep_integrity(tmp_path_factory, script):
    store = ModelStore(tmp_path_factory.mktemp("h"))
    store.commit("main", {(T, "w"): b"seed"})
    names = ["main"]
    for op, a, b in script:
        if op == "commit":
            store.commit(names[a % len(names)], {(T, f"t{b % 2}"): f"v{b}".encode(), (M, "m"): os.urandom(0) + bytes([b])})
        elif op == "branch":
            head = store.checkout(names[a % len(names)]).head
            name = f"br{len(names)}"
            store.branch(head, name)
            names.append(name)
        else:
            x, y = names[a % len(names)], names[b % len(names)]
            if x != y:
                store.merge(x, y, "prefer-b")
    assert store.verify() == []
    by_hash = {}
    for v in store.versions():
        for ref in store.snapshot(v).manifest.values():
            assert by_hash.setdefault(ref.hash, ref) == ref

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aixel.catalog import Catalog, DatasetDescriptor, Field, FieldKind, Record
from aixel.errors import PlanningError, UserError
from aixel.gateway import Gateway, MockBackend
from aixel.task import (
    DEFAULT_WEIGHTS,
    AttributeIndex,
    DeclarativeRequest,
    OperatorSpec,
    Registry,
    Telemetry,
    bind,
    default_registry,
    parse,
    run_task,
)
from aixel.task.request import normalize_value


def churn_catalog(n=200, seed=0):
    cat = Catalog()
    cat.register_dataset(DatasetDescriptor("customers", [
        Field("age", FieldKind.NUMERIC), Field("spend", FieldKind.NUMERIC), Field("latency", FieldKind.NUMERIC),
        Field("region", FieldKind.CATEGORICAL), Field("churn", FieldKind.NUMERIC), Field("note", FieldKind.TEXT),
        Field("tags", FieldKind.LABEL_SET), Field("emb", FieldKind.VECTOR, 8),
    ]))
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        age = float(rng.integers(18, 80))
        spend = float(np.round(rng.gamma(2, 50), 2))
        churn = float(rng.random() < 1 / (1 + math.exp(-(age - 45) / 8)))
        recs.append(Record(f"c{i}", {"age": age, "spend": spend, "latency": float(rng.integers(100, 5000)),
                                     "region": str(rng.choice(["north", "south"])), "churn": churn,
                                     "note": f"customer {i} note", "tags": ["vip"] if i % 3 == 0 else ["std"],
                                     "emb": rng.normal(size=8).round(4).tolist()}))
    cat.ingest("customers", recs)
    return cat


_ONE = churn_catalog(n=1)


@pytest.fixture(scope="module")
def cat():
    return churn_catalog()


def test_trivial_classify_request_grounds(cat):
    spec = parse({"objective": "classify", "target": "churn", "filters": ["age ≥ 30"]}, cat)
    assert spec.dataset == "customers" and spec.target_kind == "numeric"
    assert len(spec.constraints) == 1
    c = spec.constraints[0]
    assert (c.field, c.kind, c.lo, c.hi, c.lo_open) == ("age", "range", 30.0, math.inf, False)
    assert [s.name for s in spec.steps] == ["source", "filter", "project", "model"]
    assert spec.expected_outputs == ["predictions", "val_metric"]


@pytest.mark.parametrize("raw,expect", [("2s", 2000.0), ("150ms", 150.0), ("10k", 10000.0), ("1.5M", 1.5e6),
                                        ("3", 3.0), (7, 7.0), ("1min", 60000.0), ("north", "north")])
def test_unit_normalization(raw, expect):
    assert normalize_value(raw) == expect


def test_latency_filter_in_ms(cat):
    spec = parse({"objective": "classify", "target": "churn", "filters": ["latency ≤ 2s"]}, cat)
    assert spec.constraints[0].hi == 2000.0


def test_conflicting_filters_named(cat):
    with pytest.raises(UserError, match=r"'spend <= 10'.*'spend >= 20'|'spend >= 20'.*'spend <= 10'"):
        parse({"objective": "classify", "target": "churn", "filters": ["spend <= 10", "spend >= 20"]}, cat)
    with pytest.raises(UserError, match="region == north.*region == south"):
        parse({"objective": "classify", "target": "churn", "filters": ["region == north", "region == south"]}, cat)
    with pytest.raises(UserError, match="conflicting"):
        parse({"objective": "classify", "target": "churn", "filters": ["age > 30", "age < 30"]}, cat)


def test_incomplete_and_invalid_requests(cat):
    with pytest.raises(UserError, match="missing 'objective'.*'target'"):
        parse({"filters": []}, cat)
    with pytest.raises(UserError, match="unknown target field"):
        parse({"objective": "classify", "target": "nope"}, cat)
    with pytest.raises(UserError, match="unknown objective"):
        parse({"objective": "dance", "target": "churn"}, cat)
    with pytest.raises(UserError, match="non-negative"):
        parse({"objective": "classify", "target": "churn", "budgets": {"latency_ms": -1}}, cat)
    with pytest.raises(UserError, match="unknown field"):
        parse({"objective": "classify", "target": "churn", "filters": ["height > 3"]}, cat)
    with pytest.raises(UserError, match="does not apply"):
        parse({"objective": "classify", "target": "churn", "filters": ["region > 3"]}, cat)
    with pytest.raises(UserError, match="needs numeric"):
        parse({"objective": "regress", "target": "region"}, cat)
    with pytest.raises(UserError, match="unknown request keys"):
        DeclarativeRequest.from_dict({"objective": "classify", "colour": 1})


def test_label_and_set_constraints(cat):
    spec = parse({"objective": "classify", "target": "churn",
                  "filters": ["tags has vip", "region in [north, south]", "region != south"]}, cat)
    by = {c.field: c for c in spec.constraints}
    assert by["tags"].test(["vip", "x"]) and not by["tags"].test(["std"])
    assert by["region"].test("north") and not by["region"].test("south")


def test_nl_fragment_goes_through_gateway(cat):
    gw = Gateway(MockBackend())
    spec = parse({"objective": "classify", "target": "churn", "nl": "customers with age at least 40 and spend under 1k"},
                 cat, gw)
    by = {c.field: c for c in spec.constraints}
    assert by["age"].lo == 40 and by["spend"].hi == 1000
    assert gw.telemetry.calls == 1


def test_nl_fragment_failing_validation_after_retry(cat):
    gw = Gateway(MockBackend())
    with pytest.raises(UserError, match="after one retry.*unknown field 'height'"):
        parse({"objective": "classify", "target": "churn", "nl": "height above 3"}, cat, gw)
    assert gw.backend.invocations == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["<", "<=", ">", ">=", "=="]), st.integers(0, 100)), min_size=1, max_size=4),
       st.integers(0, 100))
def test_canonical_range_equals_conjunction(preds, probe):
    cat = _ONE
    filters = [f"age {op} {v}" for op, v in preds]
    ops = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
           "==": lambda a, b: a == b}
    try:
        spec = parse({"objective": "classify", "target": "churn", "filters": filters}, cat)
    except UserError:
        # contradictory: no integer or real point satisfies all predicates
        assert not any(all(ops[op](x / 4, v) for op, v in preds) for x in range(-4, 408))
        return
    x = float(probe)
    assert spec.constraints[0].test(x) == all(ops[op](x, v) for op, v in preds)


# -- binding ------------------------------------------------------------------------

def test_one_candidate_per_step_binds_without_fallback(cat):
    spec = parse({"objective": "regress", "target": "spend"}, cat)
    reg = default_registry().without(lambda o: o.op_id == "model.stumps")
    b = bind(spec, reg, cat)
    assert [x.op.op_id for x in b] == ["data.scan", "data.project", "model.ridge"]
    assert all(x.fallback is None for x in b)


def test_index_variant_wins_when_index_available(cat):
    spec = parse({"objective": "classify", "target": "churn", "filters": ["age >= 30"]}, cat)
    reg = default_registry()
    idx = {("customers", "age"): AttributeIndex.build(cat, "customers", "age")}
    b = {x.step: x for x in bind(spec, reg, cat, indexes=idx)}["filter"]
    # hand computation from the declared profiles at 200 rows
    scan, index = reg.get("data.filter.scan"), reg.get("data.filter.index")
    t_scan, t_idx = scan.fixed_ms + scan.per_row_ms * 200, index.fixed_ms + index.per_row_ms * 200
    best = min(t_scan, t_idx)
    s_scan = 0.4 * 1 + 0.3 * best / t_scan + 0.1 * 0 + 0.1 * 0 + 0.05 * 1 + 0.05 * 0.5
    s_idx = 0.4 * 1 + 0.3 * best / t_idx + 0.1 * 1 + 0.1 * 0 + 0.05 * 1 + 0.05 * 0.5
    assert b.scores["data.filter.scan"]["total"] == pytest.approx(s_scan)
    assert b.scores["data.filter.index"]["total"] == pytest.approx(s_idx)
    assert s_idx > s_scan and b.op.op_id == "data.filter.index" and b.fallback.op_id == "data.filter.scan"
    # without the index the index variant is not a candidate
    b2 = {x.step: x for x in bind(spec, reg, cat)}["filter"]
    assert b2.op.op_id == "data.filter.scan" and b2.fallback is None


def test_missing_model_family_is_unbindable(cat):
    spec = parse({"objective": "classify", "target": "churn"}, cat)
    reg = default_registry().without(lambda o: o.family == "Model")
    with pytest.raises(PlanningError, match="unbindable step 'model'"):
        bind(spec, reg, cat)


def test_binding_is_deterministic_and_tie_broken_by_id(cat):
    spec = parse({"objective": "classify", "target": "churn"}, cat)
    a = [x.to_dict() for x in bind(spec, default_registry(), cat)]
    assert a == [x.to_dict() for x in bind(spec, default_registry(), cat)]
    base = default_registry().get("model.logistic")
    twin = lambda i: OperatorSpec(i, "Model", base.steps, base.inputs, base.output, base.fn)  # noqa: E731
    reg = Registry([default_registry().get("data.scan"), default_registry().get("data.project"), twin("m.b"), twin("m.a")])
    b = bind(spec, reg, cat)[-1]
    assert b.op.op_id == "m.a" and b.fallback.op_id == "m.b"


def test_fallback_signature_equals_primary(cat):
    for req in ({"objective": "classify", "target": "churn", "filters": ["age > 20"]},
                {"objective": "regress", "target": "spend"}, {"objective": "answer", "target": "why?"}):
        for b in bind(parse(req, cat), default_registry(), cat):
            assert b.fallback is None or b.fallback.signature == b.op.signature


def test_telemetry_decay_and_binding_influence(tmp_path, cat):
    tel = Telemetry(tmp_path)
    for _ in range(50):
        tel.record("model.stumps", False, 5.0)
    assert tel.stats("model.stumps").success == 0.0
    for _ in range(50):
        tel.record("model.stumps", True, 5.0)
    # 50 successes after 50 failures: weight of the old half is 1/2 of the new
    assert tel.stats("model.stumps").success == pytest.approx(2 / 3, abs=0.01)
    reloaded = Telemetry(tmp_path)
    assert reloaded.stats("model.stumps").success == pytest.approx(tel.stats("model.stumps").success)
    assert (tmp_path / "model.stumps.jsonl").exists()


def test_invalid_operator_profiles():
    fn = lambda i, p, c: None  # noqa: E731
    with pytest.raises(UserError):
        OperatorSpec("x", "Data", frozenset({"filter"}), ("table",), "table", fn, per_row_ms=0)
    with pytest.raises(UserError):
        OperatorSpec("x", "Data", frozenset({"filter"}), ("table",), "bogus", fn)
    with pytest.raises(UserError):
        OperatorSpec("x", "Widgets", frozenset({"filter"}), ("table",), "table", fn)


# -- end to end ---------------------------------------------------------------------

def test_run_classify_task(cat):
    run = run_task({"objective": "classify", "target": "churn", "filters": ["age >= 30"]}, cat)
    assert run.result.status == "ok"
    (name, out), = run.result.outputs.items()
    assert 0.5 < out["val_metric"] <= 1.0 and out["metric"] == "auc"
    ages = {r.record_id: r.values["age"] for r in cat.records("customers")}
    assert all(ages[i] >= 30 for i in out["ids"])
    ex = run.explain()
    assert ex["bindings"][0]["scores"] and "filter" in ex["plan_text"]


def test_run_search_and_answer_tasks(cat):
    q = [1.0] * 8
    run = run_task({"objective": "search", "target": "similar customers", "dataset": "customers",
                    "filters": ["region == north"], "preferences": {"query_vector": q, "k": 5}}, cat)
    hits = next(iter(run.result.outputs.values()))
    assert len(hits) == 5 and all(h["region"] == "north" for h in hits)
    assert [h["_score"] for h in hits] == sorted((h["_score"] for h in hits), reverse=True)
    run = run_task({"objective": "answer", "target": "what is up?"}, cat)
    assert next(iter(run.result.outputs.values()))[0].startswith("ans-")


def test_cost_budget_is_hard(cat):
    run = run_task({"objective": "answer", "target": "a question", "dataset": "customers", "budgets": {"cost": 5}}, cat)
    assert run.result.status == "budget-exceeded" and run.result.outputs == {}

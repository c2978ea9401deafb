import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aixel.errors import PlanningError
from aixel.gateway import Gateway, MockBackend
from aixel.synth import random_plan, random_rows
from aixel.task import (
    BatchOptimizer,
    Binding,
    Call,
    Demo,
    ExecContext,
    Executor,
    LLMCall,
    Node,
    OperatorSpec,
    PlanDAG,
    PlanFailure,
    Telemetry,
    UnbatchableCall,
    answer_calls,
    default_registry,
    optimize_dag,
    synthesize,
)
from aixel.task.batching import split
from aixel.task.plan import OUT, annotate, sinks

REG = default_registry()
ROWS = random_rows(30, np.random.default_rng(0))


def bound(step, op_id, params, fallback=None):
    return Binding(step, REG.get(op_id), REG.get(fallback) if fallback else None, params, {})


def rng_filter(lo, hi, field="a"):
    return {"constraints": [{"field": field, "kind": "range", "lo": lo, "hi": hi}]}


def _ctx():
    return ExecContext(gateway=Gateway(MockBackend()), batcher=BatchOptimizer())


# -- synthesize ---------------------------------------------------------------------

def test_filter_pushed_below_projection():
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}),
                       bound("project", "data.project", {"fields": ["_id", "a"]}),
                       bound("filter", "data.filter.scan", rng_filter(10, 50))])
    assert plan.nodes["filter"].inputs == [("scan", OUT)] and plan.nodes["project"].inputs == [("filter", OUT)]
    assert plan.nodes["filter"].annotations["pushdown"] is True
    assert plan.outputs == {"filter": ("project", OUT)} or list(plan.outputs.values()) == [("project", OUT)]
    expect = [{"_id": r["_id"], "a": r["a"]} for r in ROWS if 10 <= r["a"] <= 50]
    assert next(iter(Executor(_ctx()).run(plan).outputs.values())) == expect


def test_no_pushdown_when_projection_drops_the_field_or_through_limit():
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}),
                       bound("project", "data.project", {"fields": ["_id", "c"]}),
                       bound("filter", "data.filter.scan", rng_filter(10, 50))])
    assert plan.nodes["filter"].inputs == [("project", OUT)]
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), bound("limit", "data.limit", {"n": 5}),
                       bound("filter", "data.filter.scan", rng_filter(10, 50))])
    assert plan.nodes["filter"].inputs == [("limit", OUT)]


def test_pushdown_into_join_left_side():
    deps = {"l": [], "r": [], "join": ["l", "r"], "filter": ["join"]}
    plan = synthesize([bound("l", "data.scan", {"rows": ROWS}), bound("r", "data.scan", {"rows": ROWS[:10]}),
                       bound("join", "data.join", {"key": "_id"}), bound("filter", "data.filter.scan", rng_filter(0, 40))],
                      deps=deps)
    assert plan.nodes["filter"].inputs == [("l", OUT)] and plan.nodes["join"].inputs == [("filter", OUT), ("r", OUT)]


def test_materialization_boundary_before_fan_out_and_parallel_branches():
    deps = {"scan": [], "f1": ["scan"], "f2": ["scan"]}
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), bound("f1", "data.filter.scan", rng_filter(0, 30)),
                       bound("f2", "data.sort", {"field": "b"})], deps=deps, max_parallelism=8)
    assert plan.boundaries == ["scan"] and plan.nodes["scan"].annotations["materialize"]
    assert plan.nodes["f1"].annotations["parallel"] and plan.nodes["f2"].annotations["parallel"]
    assert plan.nodes["f1"].annotations["parallelism"] == 2
    assert not plan.nodes["scan"].annotations["parallel"]
    assert plan.nodes["f1"].annotations["cache"] and plan.nodes["f1"].annotations["retry"]["retries"] == 1


def test_cycle_from_declared_dependencies():
    with pytest.raises(PlanningError, match="cycle"):
        synthesize([bound("scan", "data.scan", {"rows": ROWS}), bound("f", "data.filter.scan", rng_filter(0, 9))],
                   after=[("f", "scan")])


def test_arity_mismatch_is_planning_error():
    with pytest.raises(PlanningError):
        synthesize([bound("scan", "data.scan", {"rows": ROWS}), bound("j", "data.join", {})])


# -- optimize_dag -------------------------------------------------------------------

def _siblings(a, b):
    plan = PlanDAG()
    plan.add(Node("scan", [Call(REG.get("data.scan"), {"rows": ROWS})]))
    plan.add(Node("f1", [Call(REG.get(a[0]), a[1])], [("scan", OUT)]))
    plan.add(Node("f2", [Call(REG.get(b[0]), b[1])], [("scan", OUT)]))
    plan.outputs = sinks(plan)
    return annotate(plan)


def test_sibling_filters_merge_with_separate_channels():
    plan = _siblings(("data.filter.scan", rng_filter(0, 40)), ("data.filter.scan", rng_filter(30, 90)))
    opt, log = optimize_dag(plan)
    merged = [n for n in opt.nodes.values() if n.mode == "sibling"]
    assert len(merged) == 1 and merged[0].channels == ["f1", "f2"]
    assert opt.outputs == {"f1": ("f1|f2", "f1"), "f2": ("f1|f2", "f2")}
    applied = [e for e in log if e["applied"]]
    assert len(applied) == 1 and all(g["pass"] for g in applied[0]["guards"].values())
    assert Executor(_ctx()).run(plan).outputs == Executor(_ctx()).run(opt).outputs
    assert len(plan.nodes) == 3  # input plan untouched


def test_siblings_of_different_families_not_merged():
    plan = _siblings(("data.filter.scan", rng_filter(0, 40)),
                     ("llm.answer", {"question": "q", "field": "txt", "template_id": "t1"}))
    opt, log = optimize_dag(plan)
    assert set(opt.nodes) == {"scan", "f1", "f2"}
    rejected = [e for e in log if e["rule"] == "sibling" and not e["applied"]]
    assert rejected and rejected[0]["guards"]["same_family"]["pass"] is False


def test_llm_siblings_need_same_template_and_token_budget():
    q = lambda t: ("llm.answer", {"question": "q", "field": "txt", "template_id": t})  # noqa: E731
    opt, log = optimize_dag(_siblings(q("t1"), q("t2")))
    assert len(opt.nodes) == 3 and log[-1]["guards"]["same_template"]["pass"] is False
    opt, _ = optimize_dag(_siblings(q("t1"), q("t1")))
    assert len(opt.nodes) == 2
    opt, log = optimize_dag(_siblings(q("t1"), q("t1")), context_tokens=100)
    assert len(opt.nodes) == 3 and log[-1]["guards"]["combined_tokens"]["pass"] is False


def test_row_limit_guard():
    plan = _siblings(("data.filter.scan", rng_filter(0, 40)), ("data.filter.scan", rng_filter(30, 90)))
    opt, log = optimize_dag(plan, row_limit=20)  # 2 x 30 rows > 2 x 20
    assert len(opt.nodes) == 3 and log[-1]["guards"]["combined_rows"]["pass"] is False


def test_filter_project_chain_fuses():
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}),
                       bound("filter", "data.filter.scan", rng_filter(10, 60)),
                       bound("project", "data.project", {"fields": ["_id", "c"]}),
                       bound("map", "data.map", {"field": "a", "scale": 2.0})])
    opt, log = optimize_dag(plan)
    assert list(opt.nodes) == ["scan", "filter+project+map"] or list(opt.nodes) == ["scan", "filter+project+map"]
    assert opt.nodes["filter+project+map"].mode == "chain"
    assert Executor(_ctx()).run(plan).outputs == Executor(_ctx()).run(opt).outputs


def test_chain_longer_than_three_is_capped():
    steps = [bound("scan", "data.scan", {"rows": ROWS})]
    steps += [bound(f"f{i}", "data.filter.scan", rng_filter(i, 90)) for i in range(5)]
    opt, _ = optimize_dag(synthesize(steps))
    assert all(len(n.calls) <= 3 for n in opt.nodes.values())
    assert len(opt.nodes) == 3


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 12))
def test_merge_safety_on_random_plans(seed, n):
    plan = random_plan(seed, n_nodes=n)
    opt, log = optimize_dag(plan)
    opt.validate()
    for e in log:
        if e["applied"]:
            assert all(g["pass"] for g in e["guards"].values())
    assert Executor(_ctx(), cache=False).run(plan).outputs == Executor(_ctx(), cache=False).run(opt).outputs
    assert set(opt.outputs) == set(plan.outputs)


# -- execute ------------------------------------------------------------------------

def test_linear_plan_equals_direct_composition():
    rows = ROWS[:10]
    plan = synthesize([bound("scan", "data.scan", {"rows": rows}), bound("sort", "data.sort", {"field": "b"}),
                       bound("limit", "data.limit", {"n": 4})])
    expect = sorted(rows, key=lambda r: r["b"])[:4]
    assert next(iter(Executor(_ctx()).run(plan).outputs.values())) == expect


def _flaky(fails):
    state = {"n": 0}

    def fn(inputs, params, ctx):
        state["n"] += 1
        if state["n"] <= fails:
            raise RuntimeError("injected")
        return [r for r in inputs[0] if r["a"] < 50]
    return fn, state


def test_retry_then_fallback_and_telemetry(tmp_path):
    fn, state = _flaky(2)
    bad = OperatorSpec("test.filter.bad", "Data", frozenset({"filter"}), ("table",), "table", fn, cacheable=False)
    good = REG.get("data.filter.scan")
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}),
                       Binding("filter", bad, good, rng_filter(0, 49), {})])
    tel = Telemetry(tmp_path)
    res = Executor(_ctx(), tel).run(plan)
    assert res.nodes["filter"].fallback_used and res.nodes["filter"].attempts == 3 and state["n"] == 2
    assert next(iter(res.outputs.values())) == [r for r in ROWS if r["a"] <= 49]
    lines = (tmp_path / "test.filter.bad.jsonl").read_text().splitlines()
    assert any('"switched_to": "data.filter.scan"' in line for line in lines)

    fn, state = _flaky(1)
    once = OperatorSpec("test.filter.once", "Data", frozenset({"filter"}), ("table",), "table", fn, cacheable=False)
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), Binding("filter", once, good, rng_filter(0, 49), {})])
    res = Executor(_ctx()).run(plan)
    assert not res.nodes["filter"].fallback_used and res.nodes["filter"].attempts == 2


def test_primary_and_fallback_failing_names_node():
    fn, _ = _flaky(100)
    bad = OperatorSpec("test.bad", "Data", frozenset({"filter"}), ("table",), "table", fn, cacheable=False)
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), Binding("filter", bad, bad, {}, {})])
    with pytest.raises(PlanFailure, match="'filter'"):
        Executor(_ctx()).run(plan)


def _sleeper(op_id, secs):
    def fn(inputs, params, ctx):
        time.sleep(secs)
        return list(inputs[0])
    return OperatorSpec(op_id, "Data", frozenset({"sort"}), ("table",), "table", fn, cacheable=False)


def test_independent_branches_run_concurrently():
    s1, s2 = _sleeper("test.sleep1", 0.3), _sleeper("test.sleep2", 0.3)
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), Binding("b1", s1, None, {}, {}),
                       Binding("b2", s2, None, {}, {})], deps={"b1": ["scan"], "b2": ["scan"]})
    t0 = time.perf_counter()
    res = Executor(_ctx(), max_workers=2).run(plan)
    wall = time.perf_counter() - t0
    assert res.status == "ok" and wall < 0.55  # sequential would take >= 0.6 s


def test_latency_budget_returns_partial_results():
    s1, s2 = _sleeper("test.sleep1", 0.15), _sleeper("test.sleep2", 0.15)
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), Binding("s1", s1, None, {}, {}),
                       Binding("s2", s2, None, {}, {})])
    res = Executor(_ctx()).run(plan, latency_budget_ms=50)
    assert res.status == "budget-exceeded" and "s2" not in res.nodes and res.outputs == {}


def test_reparameterization_lowers_batch_size():
    def slow(inputs, params, ctx):
        time.sleep(0.02)
        return ["x"] * len(inputs[0])
    op = OperatorSpec("test.llm", "LLM", frozenset({"llm"}), ("table",), "answers", slow, batch_sizes=(4, 8, 16),
                      cacheable=False)
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), Binding("llm", op, None, {}, {})])
    plan.nodes["llm"].annotations["latency_budget_ms"] = 5
    ex = Executor(_ctx())
    res = ex.run(plan)
    assert res.nodes["llm"].reparam == {"batch_size": [16, 8]}
    ex.run(plan)
    assert plan.nodes["llm"].calls[0].params["batch_size"] == 4


def test_cache_serves_repeated_runs():
    plan = synthesize([bound("scan", "data.scan", {"rows": ROWS}), bound("sort", "data.sort", {"field": "a"})])
    ex = Executor(_ctx())
    a = ex.run(plan)
    b = ex.run(plan)
    assert not a.nodes["sort"].cache_hit and b.nodes["sort"].cache_hit and a.outputs == b.outputs


# -- batching -----------------------------------------------------------------------

def test_identical_queries_one_call():
    gw = Gateway(MockBackend(), cache=False)
    calls = [LLMCall(f"c{i}", "t", "what is the refund policy?") for i in range(10)]
    out = answer_calls(calls, gw, BatchOptimizer())
    assert gw.backend.invocations == 1 and len(set(out)) == 1 and len(out) == 10


def test_disjoint_templates_two_groups():
    groups = BatchOptimizer().group([LLMCall("a", "t1", "same text"), LLMCall("b", "t2", "same text")])
    assert len(groups) == 2


def _clustered(n, k, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, 64))
    return [LLMCall(f"q{i}", "answer", f"topic {i % k} item {i}", centers[i % k] + 0.2 * rng.normal(size=64))
            for i in range(n)]


def test_two_intent_clusters_cut_calls_by_30_percent():
    calls = _clustered(20, 2)
    g_un, g_b = Gateway(MockBackend(), cache=False), Gateway(MockBackend(), cache=False)
    un = answer_calls(calls, g_un, None)
    b = answer_calls(calls, g_b, BatchOptimizer())
    assert b == un
    assert g_b.backend.invocations <= 0.7 * g_un.backend.invocations


def test_group_invariants_and_unbatchable():
    opt = BatchOptimizer(context_limit=120)
    calls = _clustered(40, 3)
    for g in opt.group(calls):
        assert g.tokens() <= 120
        c = g.centroid
        assert all(m.intent @ c / (np.linalg.norm(m.intent) * np.linalg.norm(c)) >= 0.5 for m in g.members)
    with pytest.raises(UnbatchableCall):
        BatchOptimizer(context_limit=5).group([LLMCall("x", "t", "a rather long question that will not fit")])


def test_segments_deduplicated_and_demos_diverse():
    a, b = np.array([1.0, 0.6, 0, 0]), np.array([0.6, 1.0, 0, 0])
    calls = [LLMCall("c0", "t", "q 0", a, segments=("Policy:  be brief.",)),
             LLMCall("c1", "t", "q 1", b, segments=("Policy: be brief.",))]
    pool = [Demo("d1", a), Demo("d1-copy", a * 1.001 + 0.001), Demo("d2", b)]
    (g,) = BatchOptimizer(n_demos=3).group(calls, pool)
    assert g.prompt().count("CONTEXT:") == 1
    texts = sorted(d.text for d in g.demos)
    assert len(texts) == 2 and "d2" in texts  # d1 and its near-copy cannot both be chosen


def test_schedule_puts_shared_prefixes_together_and_split_rebalances():
    calls = [LLMCall("a", "t2", "x", np.array([1.0, 0])), LLMCall("b", "t1", "y", np.array([1.0, 0])),
             LLMCall("c", "t2", "z", np.array([0.0, 1]))]
    groups = BatchOptimizer().group(calls)
    assert [g.template_id for g in groups] == ["t1", "t2", "t2"]
    opt = BatchOptimizer(latency_budget_ms=0.0)
    big = opt.group(_clustered(16, 1))
    assert len(big) == 1 and big[0].batch_size == 16
    opt.observe(big[0], 10.0)
    assert [g.batch_size for g in opt.group(_clustered(16, 1))] == [8, 8]
    assert [g.batch_size for g in split(big[0])] == [8, 8]

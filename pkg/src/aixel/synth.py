"""Seeded synthetic generators used by tests, acceptance checks and scripts."""

from __future__ import annotations

import numpy as np

from .fusion_index import IndexNode


def clustered_nodes(n: int, dim: int = 32, n_clusters: int = 20, n_labels: int = 8, labels_per_node: int = 2,
                    attr_range: tuple[float, float] = (0.0, 100.0), spread: float = 0.6, seed: int = 0):
    """Gaussian-mixture embeddings with independent uniform attributes and random labels.

    Returns (nodes, centers) so queries can be drawn near the clusters.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, dim))
    x = centers[rng.integers(0, n_clusters, n)] + spread * rng.normal(size=(n, dim))
    attrs = rng.uniform(*attr_range, n)
    nodes = []
    for i in range(n):
        labs = [f"l{j}" for j in sorted(rng.choice(n_labels, labels_per_node, replace=False))]
        nodes.append(IndexNode(i, x[i], float(attrs[i]), labs))
    return nodes, centers


def queries_near(centers: np.ndarray, n: int, seed: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picks = centers[rng.integers(0, len(centers), n)]
    return picks + rng.normal(size=picks.shape)


def xor_dataset(n: int = 2000, n_noise: int = 6, seed: int = 0):
    """Binary x1, x2 and ``n_noise`` binary noise columns; y = x1 XOR x2."""
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, size=(n, 2 + n_noise))
    y = x[:, 0] ^ x[:, 1]
    names = ["x1", "x2"] + [f"noise{i}" for i in range(n_noise)]
    return x.astype(float), y, names


def separable_dataset(n: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x += np.where(y[:, None] == 1, 0.3, -0.3)  # widen the margin
    return x, y


def score_stream(n: int, rng: np.random.Generator, shift: float = 0.0, sd: float = 0.1):
    """Model scores ~ N(0.5 + shift*sd, sd) clipped to [0, 1], with labels drawn from the score."""
    s = np.clip(rng.normal(0.5 + shift * sd, sd, n), 0.0, 1.0)
    y = (rng.random(n) < s).astype(int)
    return s, y


def random_rows(n: int, rng: np.random.Generator) -> list[dict]:
    topics = ["billing", "login", "refund", "shipping"]
    return [{"_id": f"r{i}", "a": float(rng.integers(0, 100)), "b": float(np.round(rng.normal(), 3)),
             "c": str(rng.choice(["x", "y", "z"])), "txt": f"{topics[int(rng.integers(0, 4))]} issue {i % 7}"}
            for i in range(n)]


def random_plan(seed: int, n_nodes: int = 8, n_rows: int = 40, registry=None):
    """A random deterministic plan over literal rows: filters, projections, maps, sorts, limits, joins and LLM answers."""
    from .task.operators import default_registry
    from .task.plan import OUT, Call, Node, PlanDAG, annotate, sinks

    reg = registry or default_registry()
    rng = np.random.default_rng(seed)
    plan = PlanDAG(max_parallelism=4)
    rows = random_rows(n_rows, rng)
    plan.add(Node("n0", [Call(reg.get("data.scan"), {"rows": rows})]))
    tables = ["n0"]
    for i in range(1, n_nodes):
        nid = f"n{i}"
        parent = tables[int(rng.integers(0, len(tables)))]
        kind = rng.choice(["filter", "filter", "filter", "project", "map", "sort", "limit", "join", "llm"])
        if kind == "filter":
            if rng.random() < 0.7:
                lo = float(rng.integers(0, 60))
                c = {"field": "a", "kind": "range", "lo": lo, "hi": lo + float(rng.integers(10, 60))}
            else:
                c = {"field": "c", "kind": "set", "values": sorted(rng.choice(["x", "y", "z"], 2, replace=False).tolist())}
            node = Node(nid, [Call(reg.get("data.filter.scan"), {"constraints": [c]})], [(parent, OUT)])
        elif kind == "project":
            keep = ["_id", "a", "c", "txt"] if rng.random() < 0.5 else ["_id", "a", "b", "c", "txt"]
            node = Node(nid, [Call(reg.get("data.project"), {"fields": keep})], [(parent, OUT)])
        elif kind == "map":
            node = Node(nid, [Call(reg.get("data.map"), {"field": "a", "scale": float(rng.integers(1, 4)),
                                                          "offset": float(rng.integers(-5, 5))})], [(parent, OUT)])
        elif kind == "sort":
            node = Node(nid, [Call(reg.get("data.sort"), {"field": str(rng.choice(["a", "b"])),
                                                           "descending": bool(rng.random() < 0.5)})], [(parent, OUT)])
        elif kind == "limit":
            node = Node(nid, [Call(reg.get("data.limit"), {"n": int(rng.integers(1, 30))})], [(parent, OUT)])
        elif kind == "join":
            other = tables[int(rng.integers(0, len(tables)))]
            node = Node(nid, [Call(reg.get("data.join"), {"key": "_id"})], [(parent, OUT), (other, OUT)])
        else:
            tid = str(rng.choice(["t1", "t2"]))
            node = Node(nid, [Call(reg.get("llm.answer"), {"question": "summarize", "field": "txt",
                                                           "template_id": tid})], [(parent, OUT)])
            plan.add(node)
            continue
        plan.add(node)
        tables.append(nid)
    plan.outputs = sinks(plan)
    return annotate(plan)

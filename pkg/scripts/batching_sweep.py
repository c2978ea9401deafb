"""Gateway call reduction from prompt batching as intent clusters get noisier.

    python3 scripts/batching_sweep.py --queries 100 --clusters 5 --noise 0.1 0.2 0.4 0.8
"""

import argparse
from dataclasses import dataclass, field

import numpy as np

from aixel.gateway import Gateway, MockBackend
from aixel.task import BatchOptimizer, LLMCall, answer_calls


@dataclass
class BatchConfig:
    queries: int = 100
    clusters: int = 5
    dim: int = 64
    noise: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.4, 0.8])
    context_limit: int = 1024
    seed: int = 0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    d = BatchConfig()
    ap.add_argument("--queries", type=int, default=d.queries)
    ap.add_argument("--clusters", type=int, default=d.clusters)
    ap.add_argument("--noise", type=float, nargs="+", default=d.noise)
    ap.add_argument("--context-limit", type=int, default=d.context_limit)
    a = ap.parse_args()
    cfg = BatchConfig(a.queries, a.clusters, d.dim, a.noise, a.context_limit)
    rng = np.random.default_rng(cfg.seed)
    centers = rng.normal(size=(cfg.clusters, cfg.dim))
    for sigma in cfg.noise:
        calls = [LLMCall(f"q{i}", "answer", f"cluster {i % cfg.clusters} question {i}",
                         centers[i % cfg.clusters] + sigma * rng.normal(size=cfg.dim)) for i in range(cfg.queries)]
        g0, g1 = Gateway(MockBackend(1)), Gateway(MockBackend(1))
        same = answer_calls(calls, g0, None) == answer_calls(calls, g1, BatchOptimizer(cfg.context_limit))
        n0, n1 = g0.backend.invocations, g1.backend.invocations
        print(f"noise={sigma:<4} calls {n0:>3} -> {n1:>3} ({1 - n1 / n0:5.0%} fewer), identical outputs: {same}")


if __name__ == "__main__":
    main()

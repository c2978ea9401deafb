"""Recall and traversal cost of constrained search against an ef_search sweep.

    python3 scripts/search_sweep.py --n 5000 --queries 100 --ef 32 64 128 256
"""

import argparse
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from aixel.fusion_index import FusionIndex, IndexParams
from aixel.search import ConstraintProfile, brute_force, recall, search, search_then_filter
from aixel.synth import clustered_nodes, queries_near


@dataclass
class SweepConfig:
    n: int = 5000
    dim: int = 32
    queries: int = 100
    k: int = 10
    ef: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    selectivity: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.3, 1.0])
    seed: int = 0


def run(cfg: SweepConfig) -> list[dict]:
    nodes, centers = clustered_nodes(cfg.n, cfg.dim, seed=cfg.seed)
    t0 = time.perf_counter()
    idx = FusionIndex(cfg.dim, IndexParams(seed=cfg.seed))
    idx.build(nodes)
    print(f"built {cfg.n} nodes in {time.perf_counter() - t0:.1f}s")
    qs = queries_near(centers, cfg.queries, seed=cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for sel in cfg.selectivity:
        width = 100.0 * sel
        los = rng.uniform(0, 100 - width, cfg.queries) if sel < 1 else np.zeros(cfg.queries)
        profs = [ConstraintProfile((lo, lo + width)) for lo in los]
        truths = [brute_force(idx, q, cfg.k, p).ids() for q, p in zip(qs, profs)]
        for ef in cfg.ef:
            rec, ratio = [], []
            for q, p, t in zip(qs, profs, truths):
                res = search(idx, q, cfg.k, p, ef_search=ef)
                rec.append(recall(res.ids(), t))
                ratio.append(res.visited / max(1, search_then_filter(idx, q, cfg.k, p, ef_search=ef).visited))
            rows.append({"selectivity": sel, "ef": ef, "recall": float(np.mean(rec)),
                         "visited_ratio_median": float(np.median(ratio))})
            print(f"sel={sel:<5} ef={ef:<4} recall@{cfg.k}={rows[-1]['recall']:.3f} "
                  f"visited/baseline={rows[-1]['visited_ratio_median']:.3f}")
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    d = SweepConfig()
    ap.add_argument("--n", type=int, default=d.n)
    ap.add_argument("--dim", type=int, default=d.dim)
    ap.add_argument("--queries", type=int, default=d.queries)
    ap.add_argument("--ef", type=int, nargs="+", default=d.ef)
    ap.add_argument("--selectivity", type=float, nargs="+", default=d.selectivity)
    ap.add_argument("--seed", type=int, default=d.seed)
    ap.add_argument("--out", help="write results JSON here")
    a = ap.parse_args()
    cfg = SweepConfig(a.n, a.dim, a.queries, 10, a.ef, a.selectivity, a.seed)
    rows = run(cfg)
    if a.out:
        with open(a.out, "w") as f:
            json.dump({"config": asdict(cfg), "rows": rows}, f, indent=1)


if __name__ == "__main__":
    main()

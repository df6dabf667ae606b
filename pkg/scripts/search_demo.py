#!/usr/bin/env python3
"""Config-search demo on a memory-tight 16-device cluster.

Runs the same space twice, with and without the pruning tactics, and prints
the trial-status breakdown, the pruned fraction, and a check that both
searches agree on the best recipe.

Usage: python scripts/search_demo.py [--capacity-mb 32] [--jobs 1]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from dltsim.cluster import ClusterSpec, DeviceClass, LinkClass
from dltsim.estimate import RooflineEstimator
from dltsim.search import (PipelineEvaluator, SearchSpace, make_strategy,
                           run_search)
from dltsim.workload import ModelSpec

GIGA = 1_000_000_000

# Power-of-two rates: integer durations land exactly, which keeps the
# copy-runtime tactics bit-exact against ground truth.
DEVICE = DeviceClass(
    name="exact",
    peak_flops={"bf16": 4096 * GIGA, "fp16": 4096 * GIGA, "fp32": 4096 * GIGA},
    hbm_bytes_per_s=1024 * GIGA,
    links={"intra_host": LinkClass(0, 256 * GIGA),
           "inter_host": LinkClass(2000, 128 * GIGA)},
)
EFFICIENCY = {k: 0.5 for k in ("gemm", "layernorm", "softmax", "gelu", "add",
                               "embed", "cross_entropy", "optimizer_step")}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--capacity-mb", type=int, default=32)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--strategy", default="grid",
                    choices=["grid", "random", "evolutionary"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = ModelSpec("lab", num_layers=8, hidden_size=128, seq_len=256,
                      vocab_size=4096)
    cluster = ClusterSpec(2, 8, args.capacity_mb * 10**6, DEVICE)
    space = SearchSpace(tp=(1, 2, 4, 8), pp=(1, 2), micro_mult=(1, 2),
                        virtual_stages=(1,), dist_optimizer=(False, True),
                        global_batch=64)
    evaluator = PipelineEvaluator(
        model=model, cluster=cluster,
        estimator=RooflineEstimator(efficiency=EFFICIENCY, overhead_ns=0),
        dispatch_overhead_ns=0)

    results = {}
    for tactics in (False, True):
        label = "with tactics" if tactics else "exhaustive"
        t0 = time.time()
        res = run_search(space, evaluator, make_strategy(args.strategy, args.seed),
                         model, cluster, jobs=args.jobs, use_tactics=tactics,
                         deterministic=args.jobs > 1)
        wall = time.time() - t0
        results[tactics] = res
        simulated = sum(1 for r in res.trials if r.provenance == "simulated")
        print(f"{label:>13}: {len(res.trials)} trials, {simulated} simulated, "
              f"breakdown {res.status_breakdown()}, "
              f"pruned {res.pruned_fraction():.0%}, {wall:.1f}s")

    best_plain = results[False].best
    best_pruned = results[True].best
    same = best_plain.config == best_pruned.config
    print(f"best (exhaustive):   {best_plain.config.label()} "
          f"{best_plain.time_ns / 1e6:.3f} ms mfu {best_plain.mfu:.4f}")
    print(f"best (with tactics): {best_pruned.config.label()} "
          f"{best_pruned.time_ns / 1e6:.3f} ms mfu {best_pruned.mfu:.4f}")
    print(f"fidelity preserved: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())

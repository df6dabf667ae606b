#!/usr/bin/env python3
"""Data-parallel scaling study: fix TP8/PP8 and grow DP, watch MFU sink.

With the global batch held constant, every added data-parallel replica
shrinks per-device compute while the gradient AllReduce stays the same size
and crosses more hosts, so communication overhead dominates at scale and
predicted MFU decays sublinearly.

Usage: python scripts/dp_scaling.py [--model tiny] [--device slow] [--out dp_scaling.svg]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from dltsim.cluster import ClusterSpec, load_device_preset
from dltsim.collate import collate
from dltsim.estimate import RooflineEstimator, annotate
from dltsim.sim import compute_mfu, simulate
from dltsim.workload import (ConfigPoint, ScheduleKind,
                             generate_representatives, load_model_preset)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="tiny", help="bundled model preset name")
    ap.add_argument("--device", default="slow", help="bundled device preset name")
    ap.add_argument("--global-batch", type=int, default=64)
    ap.add_argument("--dp", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--out", default="dp_scaling.svg")
    args = ap.parse_args()

    model = load_model_preset(args.model)
    device = load_device_preset(args.device)
    estimator = RooflineEstimator()
    rows = []
    print(f"{'dp':>4} {'devices':>8} {'iter/ms':>10} {'mfu':>8} {'exposed%':>9}")
    for dp in args.dp:
        cluster = ClusterSpec(8 * dp, 8, 2**62, device)
        config = ConfigPoint(tp=8, pp=8, micro_mult=1, virtual_stages=1,
                             act_recompute=False, seq_parallel=False,
                             dist_optimizer=False, global_batch=args.global_batch)
        traces, expansion = generate_representatives(
            model, config, cluster, ScheduleKind.ONE_F_ONE_B)
        report = simulate(annotate(collate(traces, expansion, cluster), estimator))
        mfu = compute_mfu(report, model.iteration_flops(config.global_batch),
                          cluster, model.dtype)
        exposed = max(s.exposed_comm_ns for s in report.per_rank.values())
        rows.append((dp, cluster.num_devices, report.total_ns, mfu))
        print(f"{dp:>4} {cluster.num_devices:>8} {report.total_ns / 1e6:>10.3f} "
              f"{mfu:>8.4f} {100 * exposed / report.total_ns:>9.1f}")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    dps = [r[0] for r in rows]
    ax1.plot(dps, [r[3] for r in rows], "o-", color="#4878cf")
    ax1.set_xscale("log", base=2)
    ax1.set_xlabel("data-parallel degree")
    ax1.set_ylabel("predicted MFU")
    ax2.plot(dps, [r[2] / 1e6 for r in rows], "o-", color="#d65f5f")
    ax2.set_xscale("log", base=2)
    ax2.set_xlabel("data-parallel degree")
    ax2.set_ylabel("iteration time (ms)")
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Date": None})
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Operator-facing command line: the pipeline stages as subcommands.

    dltsim generate  --model M --cluster C --config CFG --out DIR
    dltsim collate   --cluster C --traces DIR --out DIR
    dltsim predict   --model M --cluster C --config CFG --out DIR
    dltsim search    --model M --cluster C --search-spec S --out DIR

All inputs are small yaml files; all randomness funnels through --seed.
Outputs are byte-stable given fixed inputs and seed.  Exit codes: 0 success
(an OOM-flagged prediction is a success), 1 usage error, 2 data/validation
error, 3 internal error.  DLTSIM_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import dataclass

import yaml

from .cluster import ClusterSpec, load_cluster
from .collate import (CollationError, collate, compose_expansion, dedup_workers,
                      load_job, save_job)
from .estimate import (EstimationError, ProfileTable, RooflineEstimator,
                       TableEstimator, annotate)
from .search import (SearchResult, SearchSpace, StopRule, PipelineEvaluator,
                     make_strategy, run_search)
from .sim import SimDeadlockError, compute_mfu, simulate
from .trace import TraceError, parse_trace
from .workload import (ConfigError, ConfigPoint, DEFAULT_DISPATCH_OVERHEAD_NS,
                       ModelSpec, ScheduleKind, config_from_mapping,
                       default_schedule, generate_representatives, load_model)

log = logging.getLogger("dltsim")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dltsim", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, config=True):
        sp.add_argument("--cluster", required=True, help="cluster spec yaml")
        if model:
            sp.add_argument("--model", required=True, help="model spec yaml")
        if config:
            sp.add_argument("--config", required=True, help="training config yaml")
        sp.add_argument("--schedule", choices=[k.value for k in ScheduleKind],
                        help="pipeline schedule (default: derived from config)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="emit traces for the unique workers")
    common(g)

    c = sub.add_parser("collate", help="deduplicate and collate trace files")
    c.add_argument("--cluster", required=True)
    c.add_argument("--traces", required=True, help="directory of rank_<r>.trace files")
    c.add_argument("--out", required=True)

    pr = sub.add_parser("predict", help="run the full prediction pipeline for one config")
    common(pr)
    pr.add_argument("--estimator", default="roofline",
                    help="'roofline' or 'table:<profile file>'")

    se = sub.add_parser("search", help="explore a configuration space")
    se.add_argument("--cluster", required=True)
    se.add_argument("--model", required=True)
    se.add_argument("--search-spec", required=True, help="search space yaml")
    se.add_argument("--estimator", default="roofline")
    se.add_argument("--strategy", choices=["grid", "random", "evolutionary"])
    se.add_argument("--seed", type=int, default=0)
    se.add_argument("--jobs", type=int, default=1)
    se.add_argument("--no-tactics", action="store_true",
                    help="disable fidelity-preserving pruning")
    se.add_argument("--deterministic-search", action="store_true",
                    help="barrier-per-batch dispatch, reproducible with --jobs > 1")
    se.add_argument("--out", required=True)
    return p


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _make_estimator(spec: str) -> RooflineEstimator | TableEstimator:
    if spec == "roofline":
        return RooflineEstimator()
    if spec.startswith("table:"):
        return TableEstimator(ProfileTable.load(_require_file(spec[len("table:"):])))
    raise UsageError(f"unknown estimator {spec!r} (use 'roofline' or 'table:<path>')")


def _load_yaml(path: str) -> dict:
    with open(_require_file(path)) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return data


@dataclass(frozen=True)
class RunManifest:
    """One run's validated inputs.

    Construction resolves and parses every referenced file, so a run fails
    before any stage executes rather than halfway through.
    """

    model: ModelSpec
    cluster: ClusterSpec
    config: ConfigPoint
    raw_config: dict
    out_dir: str
    seed: int = 0
    schedule: ScheduleKind | None = None

    @staticmethod
    def from_args(args) -> "RunManifest":
        cluster = load_cluster(_require_file(args.cluster))
        model = load_model(_require_file(args.model))
        raw = _load_yaml(args.config)
        config = config_from_mapping(raw)
        schedule = (ScheduleKind.from_name(args.schedule)
                    if getattr(args, "schedule", None) else None)
        return RunManifest(model, cluster, config, raw, args.out,
                           getattr(args, "seed", 0), schedule)

    def schedule_for(self) -> ScheduleKind:
        return self.schedule or default_schedule(self.config)

    @property
    def dispatch_overhead_ns(self) -> int:
        return int(self.raw_config.get("dispatch_overhead_ns",
                                       DEFAULT_DISPATCH_OVERHEAD_NS))


def cmd_generate(args) -> int:
    run = RunManifest.from_args(args)
    log.info("generating traces for %s on %d devices", run.config.label(),
             run.cluster.num_devices)
    traces, expansion = generate_representatives(
        run.model, run.config, run.cluster, run.schedule_for(), seed=run.seed,
        dispatch_overhead_ns=run.dispatch_overhead_ns)
    job = collate(traces, expansion, run.cluster)
    manifest = save_job(job, run.out_dir)
    print(f"unique workers: {len(traces)} of {run.cluster.num_devices} ranks "
          f"({len(expansion)} reconstructed by expansion)")
    for tr in traces:
        print(f"  rank {tr.global_rank}: {len(tr.events)} events")
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_collate(args) -> int:
    cluster = load_cluster(_require_file(args.cluster))
    manifest_path = os.path.join(args.traces, "job.manifest")
    if os.path.isfile(manifest_path):
        prior = load_job(manifest_path, cluster)
        traces = [prior.reps[r] for r in sorted(prior.reps)]
        outer = {rank: _entry_of(prior, rank) for rank in prior.dup_of}
    else:
        files = sorted(glob.glob(os.path.join(args.traces, "rank_*.trace")))
        if not files:
            raise ConfigError(f"no rank_*.trace files in {args.traces}")
        traces = []
        for path in files:
            with open(path) as f:
                traces.append(parse_trace(f))
        outer = {}
    reps, dedup = dedup_workers(traces)
    expansion = compose_expansion(outer, dedup)
    job = collate(reps, expansion, cluster)
    manifest = save_job(job, args.out)
    print(f"collated {cluster.num_devices} ranks into {len(reps)} duplicate classes")
    print(f"collective groups: {len(job.groups)}, matched calls: {len(job.calls)}")
    print(f"wrote {manifest}")
    return EXIT_OK


def _entry_of(job, rank):
    from .collate import DupEntry
    return DupEntry(job.dup_of[rank], dict(job.comm_map[rank]))


def cmd_predict(args) -> int:
    run = RunManifest.from_args(args)
    estimator = _make_estimator(args.estimator)
    schedule = run.schedule_for()

    log.info("predicting %s (%s schedule) on %d devices", run.config.label(),
             schedule.value, run.cluster.num_devices)
    traces, expansion = generate_representatives(
        run.model, run.config, run.cluster, schedule, seed=run.seed,
        dispatch_overhead_ns=run.dispatch_overhead_ns)
    job = collate(traces, expansion, run.cluster)
    log.info("collated %d communicator groups, %d calls", len(job.groups),
             len(job.calls))
    annotated = annotate(job, estimator)
    report = simulate(annotated, record_timeline=True)
    log.info("simulated %d ops in %d ns", report.completed_ops, report.total_ns)
    report.mfu = compute_mfu(
        report, run.model.iteration_flops(run.config.global_batch),
        run.cluster, run.model.dtype)

    os.makedirs(run.out_dir, exist_ok=True)
    payload = report.to_dict()
    payload["config"] = dict(sorted(run.raw_config.items()))
    payload["schedule"] = schedule.value
    payload["unique_workers"] = len(traces)
    payload["warnings"] = list(annotated.warnings)
    with open(os.path.join(run.out_dir, "report.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(run.out_dir, "timeline.json"), "w") as f:
        f.write(report.to_timeline_json())
        f.write("\n")

    mfu = "n/a (OOM)" if report.mfu is None else f"{report.mfu:.4f}"
    exposed = max((s.exposed_comm_ns for s in report.per_rank.values()), default=0)
    frac = exposed / report.total_ns if report.total_ns else 0.0
    lines = [
        f"iteration time: {report.total_ns / 1e6:.3f} ms",
        f"mfu: {mfu}",
        f"exposed comm (worst rank): {frac * 100:.1f}%",
        f"peak memory: {report.peak_mem_bytes / 2**30:.3f} GiB "
        f"of {run.cluster.device_memory_bytes / 2**30:.3f} GiB",
        f"oom: {report.oom}" + (f" (first at rank {report.first_oom[0]}, "
                                f"seq {report.first_oom[1]})" if report.oom else ""),
        f"unique workers: {len(traces)} of {run.cluster.num_devices}",
    ]
    for w in annotated.warnings:
        lines.append(f"warning: {w}")
    summary = "\n".join(lines) + "\n"
    with open(os.path.join(run.out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    print(summary, end="")
    return EXIT_OK


def _plot_search(result: SearchResult, out_dir: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "dltsim"

    times = [r.time_ns / 1e6 for r in result.trials if r.has_runtime]
    fig, ax = plt.subplots(figsize=(6, 4))
    if times:
        ax.hist(times, bins=min(30, max(5, len(times) // 3)), color="#4878cf")
    ax.set_xlabel("predicted iteration time (ms)")
    ax.set_ylabel("configs")
    ax.set_title("predicted time distribution")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "time_distribution.svg"),
                metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [i for i, r in enumerate(result.trials) if r.has_runtime]
    ys = [r.mfu for r in result.trials if r.has_runtime]
    ax.plot(xs, ys, ".", color="#4878cf")
    ax.set_xlabel("trial index")
    ax.set_ylabel("predicted mfu")
    ax.set_title("mfu per evaluated config")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "mfu_vs_config.svg"), metadata={"Date": None})
    plt.close(fig)


def cmd_search(args) -> int:
    model = load_model(_require_file(args.model))
    cluster = load_cluster(_require_file(args.cluster))
    raw = _load_yaml(args.search_spec)

    knobs = raw.get("knobs", {})
    defaults = SearchSpace()
    space = SearchSpace(
        tp=tuple(knobs.get("tp", defaults.tp)),
        pp=tuple(knobs.get("pp", defaults.pp)),
        micro_mult=tuple(knobs.get("micro_mult", defaults.micro_mult)),
        virtual_stages=tuple(knobs.get("virtual_stages", defaults.virtual_stages)),
        act_recompute=tuple(knobs.get("act_recompute", defaults.act_recompute)),
        seq_parallel=tuple(knobs.get("seq_parallel", defaults.seq_parallel)),
        dist_optimizer=tuple(knobs.get("dist_optimizer", defaults.dist_optimizer)),
        global_batch=int(raw["global_batch"]),
    )
    strategy = make_strategy(args.strategy or raw.get("strategy", "grid"), args.seed)
    stop = None
    if "early_stop" in raw:
        es = raw["early_stop"] or {}
        stop = StopRule(window=int(es.get("window", 20)), top_k=int(es.get("top_k", 5)))
    evaluator = PipelineEvaluator(
        model=model, cluster=cluster, estimator=_make_estimator(args.estimator),
        dispatch_overhead_ns=int(raw.get("dispatch_overhead_ns",
                                         DEFAULT_DISPATCH_OVERHEAD_NS)))
    log.info("searching %d lattice points (strategy %s, jobs %d)",
             len(space.points()), strategy.name, args.jobs)
    result = run_search(
        space, evaluator, strategy, model, cluster, jobs=args.jobs,
        use_tactics=not args.no_tactics, stop=stop,
        max_trials=raw.get("max_trials"), deterministic=args.deterministic_search)

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for rec in result.ranked:
        rows.append({
            "config": rec.config.label(),
            "knobs": dict(zip(("tp", "pp", "micro_mult", "virtual_stages",
                               "act_recompute", "seq_parallel", "dist_optimizer",
                               "global_batch"), rec.config.key())),
            "status": rec.status.value,
            "time_ns": rec.time_ns,
            "mfu": rec.mfu,
            "provenance": rec.provenance,
            "tactic": rec.tactic,
            "premise": rec.premise.label() if rec.premise else None,
            "error": rec.error,
        })
    payload = {
        "trials": rows,
        "status_breakdown": result.status_breakdown(),
        "pruned_fraction": result.pruned_fraction(),
        "stopped_early": result.stopped_early,
    }
    with open(os.path.join(args.out, "ranked.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")

    lines = [f"{'rank':>4}  {'config':<28} {'status':<15} "
             f"{'time/ms':>10} {'mfu':>7}  provenance"]
    for idx, rec in enumerate(result.ranked):
        t = f"{rec.time_ns / 1e6:.3f}" if rec.time_ns is not None else "-"
        mfu = f"{rec.mfu:.4f}" if rec.mfu is not None else "-"
        lines.append(f"{idx:>4}  {rec.config.label():<28} {rec.status.value:<15} "
                     f"{t:>10} {mfu:>7}  {rec.provenance}")
    lines.append("")
    lines.append(f"status breakdown: {result.status_breakdown()}")
    lines.append(f"pruned fraction: {result.pruned_fraction():.3f}")
    lines.append(f"stopped early: {result.stopped_early}")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "ranked.txt"), "w") as f:
        f.write(table)
    _plot_search(result, args.out)

    best = result.best
    if best is not None and best.has_runtime:
        print(f"best config: {best.config.label()} "
              f"time {best.time_ns / 1e6:.3f} ms mfu {best.mfu:.4f}")
    print(f"trials: {len(result.trials)} breakdown {result.status_breakdown()} "
          f"pruned {result.pruned_fraction() * 100:.1f}%")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DLTSIM_LOG", "WARNING").upper())
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "collate":
            return cmd_collate(args)
        if args.command == "predict":
            return cmd_predict(args)
        if args.command == "search":
            return cmd_search(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TraceError, CollationError, EstimationError,
            FileNotFoundError, yaml.YAMLError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SimDeadlockError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

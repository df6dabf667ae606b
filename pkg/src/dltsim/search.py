"""Configuration-space search over the prediction pipeline.

The evaluator for one config runs generate -> collate -> annotate -> simulate
on the unique workers only.  Before evaluating a candidate, the runner
consults four pruning tactics against the history of finished trials; a
tactic verdict records the trial as SkippedPruned with an inferred result
instead of simulating it:

1. a config that OOMed *with* activation recomputation implies OOM for the
   config differing only by recomputation off (it stashes strictly more);
2. same implication for sequence parallelism on -> off;
3. a config that fit *without* the distributed optimizer keeps its runtime
   when only the distributed optimizer is switched on (same bytes on the
   wire under the ring model, same step work);
4. with no pipeline (pp == 1), increasing only the microbatch count keeps
   the runtime of the smaller-count config.

"Differing only by ..." means equal on every other knob.  Tactics fire in the
order above; inferred results may serve as premises for later tactics.

Concurrency: trials are independent; the tactic history a trial sees is the
snapshot at its dispatch, so with a process pool the pruned set can depend on
completion order.  Serial runs (jobs=1) and barrier-batched runs
(deterministic=True) are reproducible bit for bit.
"""

from __future__ import annotations

import enum
import itertools
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

from .cluster import ClusterSpec
from .collate import collate
from .estimate import EstimatorInterface, annotate
from .sim import compute_mfu, simulate
from .workload import (ConfigPoint, ModelSpec, ScheduleKind, default_schedule,
                       generate_representatives, validate_config)


@dataclass(frozen=True)
class SearchSpace:
    """Per-knob candidate lists; the default mirrors the bundled knob table."""

    tp: tuple[int, ...] = (1, 2, 4, 8)
    pp: tuple[int, ...] = (1, 2, 4, 8)
    micro_mult: tuple[int, ...] = (1, 2, 4, 6, 8)
    virtual_stages: tuple[int, ...] = (1, 2, 4)
    act_recompute: tuple[bool, ...] = (True, False)
    seq_parallel: tuple[bool, ...] = (True, False)
    dist_optimizer: tuple[bool, ...] = (True, False)
    global_batch: int = 512

    def points(self) -> list[ConfigPoint]:
        out = []
        for tp, pp, mm, vs, rc, sp, dz in itertools.product(
                self.tp, self.pp, self.micro_mult, self.virtual_stages,
                self.act_recompute, self.seq_parallel, self.dist_optimizer):
            out.append(ConfigPoint(tp, pp, mm, vs, rc, sp, dz, self.global_batch))
        return out


def enumerate_space(space: SearchSpace, model: ModelSpec, cluster: ClusterSpec,
                    with_invalid: bool = False):
    """Valid ConfigPoints of the lattice in deterministic order.

    With ``with_invalid`` returns (config, reasons) pairs for every point,
    reasons being empty for valid ones.
    """
    points = space.points()
    if not points:
        raise ValueError("empty search space")
    annotated = [(c, validate_config(model, c, cluster)) for c in points]
    if with_invalid:
        return annotated
    return [c for c, reasons in annotated if not reasons]


class TrialStatus(enum.Enum):
    COMPLETED = "completed"
    OOM = "oom"
    SKIPPED_PRUNED = "skipped_pruned"
    INVALID = "invalid"


@dataclass
class TrialRecord:
    config: ConfigPoint
    status: TrialStatus
    time_ns: int | None = None
    mfu: float | None = None
    peak_mem_bytes: int | None = None
    provenance: str = "simulated"           # "simulated" | "inferred"
    tactic: str | None = None
    premise: ConfigPoint | None = None      # dominating prior trial's config
    error: str | None = None

    @property
    def is_oom(self) -> bool:
        return self.status is TrialStatus.OOM or (
            self.status is TrialStatus.SKIPPED_PRUNED and self.time_ns is None)

    @property
    def has_runtime(self) -> bool:
        return self.time_ns is not None


@dataclass(frozen=True)
class Verdict:
    kind: str                    # "mark_oom" | "copy_runtime"
    tactic: str
    premise: TrialRecord


def _same_except(a: ConfigPoint, b: ConfigPoint, knob: str) -> bool:
    return replace(a, **{knob: getattr(b, knob)}) == b


def _tactic_oom_flag_off(flag: str, name: str):
    def predicate(history: Sequence[TrialRecord], cand: ConfigPoint) -> Verdict | None:
        if getattr(cand, flag):
            return None
        for rec in history:
            if (rec.is_oom and getattr(rec.config, flag)
                    and _same_except(cand, rec.config, flag)):
                return Verdict("mark_oom", name, rec)
        return None
    return predicate


def _tactic_dist_optimizer(history: Sequence[TrialRecord], cand: ConfigPoint
                           ) -> Verdict | None:
    if not cand.dist_optimizer:
        return None
    for rec in history:
        if (rec.has_runtime and not rec.config.dist_optimizer
                and _same_except(cand, rec.config, "dist_optimizer")):
            return Verdict("copy_runtime", "dist-optimizer-runtime", rec)
    return None


def _tactic_more_microbatches(history: Sequence[TrialRecord], cand: ConfigPoint
                              ) -> Verdict | None:
    if cand.pp != 1:
        return None
    best = None
    for rec in history:
        if (rec.has_runtime and rec.config.pp == 1
                and rec.config.micro_mult < cand.micro_mult
                and _same_except(cand, rec.config, "micro_mult")):
            if best is None or rec.config.micro_mult < best.config.micro_mult:
                best = rec
    if best is not None:
        return Verdict("copy_runtime", "more-microbatches-runtime", best)
    return None


TACTICS: tuple[tuple[str, Callable], ...] = (
    ("oom-without-recompute", _tactic_oom_flag_off("act_recompute", "oom-without-recompute")),
    ("oom-without-seq-parallel", _tactic_oom_flag_off("seq_parallel", "oom-without-seq-parallel")),
    ("dist-optimizer-runtime", _tactic_dist_optimizer),
    ("more-microbatches-runtime", _tactic_more_microbatches),
)


def apply_tactics(history: Sequence[TrialRecord], candidate: ConfigPoint
                  ) -> Verdict | None:
    """First matching tactic wins, in fixed order."""
    for _, predicate in TACTICS:
        verdict = predicate(history, candidate)
        if verdict is not None:
            return verdict
    return None


@dataclass(frozen=True)
class EvalResult:
    time_ns: int
    mfu: float | None
    peak_mem_bytes: int
    oom: bool


@dataclass(frozen=True)
class PipelineEvaluator:
    """generate -> collate -> annotate -> simulate for one config.

    Picklable so trials can run in a process pool.
    """

    model: ModelSpec
    cluster: ClusterSpec
    estimator: EstimatorInterface
    dispatch_overhead_ns: int = 0
    schedule: ScheduleKind | None = None     # None: derived from the config

    def __call__(self, config: ConfigPoint) -> EvalResult:
        schedule = self.schedule or default_schedule(config)
        traces, expansion = generate_representatives(
            self.model, config, self.cluster, schedule,
            dispatch_overhead_ns=self.dispatch_overhead_ns)
        job = collate(traces, expansion, self.cluster)
        report = simulate(annotate(job, self.estimator))
        mfu = compute_mfu(report, self.model.iteration_flops(config.global_batch),
                          self.cluster, self.model.dtype)
        return EvalResult(report.total_ns, mfu, report.peak_mem_bytes, report.oom)


@dataclass(frozen=True)
class StopRule:
    """Stop once the identity of the top-k trial set (by MFU) is unchanged
    across the last ``window`` trials that completed with a runtime."""

    window: int = 20
    top_k: int = 5


def early_stop(history: Sequence[TrialRecord], window: int = 20, top_k: int = 5) -> bool:
    scored = [rec for rec in history if rec.has_runtime]
    if len(scored) < window:
        return False
    def top_set(prefix: Sequence[TrialRecord]) -> frozenset:
        ranked = sorted(prefix, key=lambda r: (-(r.mfu or 0.0), r.config.key()))
        return frozenset(r.config.key() for r in ranked[:top_k])
    current = top_set(scored)
    for i in range(1, window):
        if top_set(scored[:len(scored) - i]) != current:
            return False
    return True


# --- strategies -----------------------------------------------------------------

class Strategy:
    name = "base"

    def order(self, configs: list[ConfigPoint]) -> Iterable[ConfigPoint]:
        raise NotImplementedError


class GridStrategy(Strategy):
    name = "grid"

    def order(self, configs):
        return list(configs)


@dataclass
class RandomStrategy(Strategy):
    seed: int = 0
    name = "random"

    def order(self, configs):
        out = list(configs)
        random.Random(self.seed).shuffle(out)
        return out


@dataclass
class EvolutionaryStrategy(Strategy):
    """(mu, lambda) evolution over the discrete lattice: children mutate one
    knob of a parent to a neighboring lattice value; unseen points only."""

    seed: int = 0
    mu: int = 4
    lam: int = 12
    name = "evolutionary"

    def ordered_run(self, configs: list[ConfigPoint], space: SearchSpace,
                    score_of: Callable[[ConfigPoint], float | None]
                    ) -> Iterable[list[ConfigPoint]]:
        rng = random.Random(self.seed)
        valid = set(c.key() for c in configs)
        by_key = {c.key(): c for c in configs}
        unseen = list(configs)
        knobs = ("tp", "pp", "micro_mult", "virtual_stages",
                 "act_recompute", "seq_parallel", "dist_optimizer")

        def mutate(parent: ConfigPoint) -> ConfigPoint | None:
            knob = rng.choice(knobs)
            options = getattr(space, knob)
            cur = getattr(parent, knob)
            idx = options.index(cur)
            step = rng.choice((-1, 1))
            new_idx = min(max(idx + step, 0), len(options) - 1)
            child = replace(parent, **{knob: options[new_idx]})
            return child if child.key() in valid else None

        first = unseen[:self.lam]
        del unseen[:self.lam]
        yield first
        while unseen:
            scored = [(score_of(by_key[k]), k) for k in valid if score_of(by_key[k]) is not None]
            scored.sort(key=lambda x: (-x[0], x[1]))
            parents = [by_key[k] for _, k in scored[:self.mu]]
            batch: list[ConfigPoint] = []
            attempts = 0
            while len(batch) < self.lam and attempts < 20 * self.lam and unseen:
                attempts += 1
                child = mutate(rng.choice(parents)) if parents else None
                if child is not None and child in unseen and child not in batch:
                    batch.append(child)
            for c in batch:
                unseen.remove(c)
            while len(batch) < self.lam and unseen:
                batch.append(unseen.pop(rng.randrange(len(unseen))))
            yield batch


def make_strategy(name: str, seed: int = 0) -> Strategy:
    if name == "grid":
        return GridStrategy()
    if name == "random":
        return RandomStrategy(seed)
    if name == "evolutionary":
        return EvolutionaryStrategy(seed)
    raise ValueError(f"unknown strategy {name!r}")


# --- runner ---------------------------------------------------------------------

@dataclass
class SearchResult:
    trials: list[TrialRecord]
    ranked: list[TrialRecord]
    stopped_early: bool

    def status_breakdown(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.trials:
            counts[rec.status.value] = counts.get(rec.status.value, 0) + 1
        return counts

    @property
    def best(self) -> TrialRecord | None:
        return self.ranked[0] if self.ranked else None

    def pruned_fraction(self) -> float:
        n = len(self.trials)
        if n == 0:
            return 0.0
        pruned = sum(1 for r in self.trials if r.status is TrialStatus.SKIPPED_PRUNED)
        return pruned / n


def _rank(trials: list[TrialRecord]) -> list[TrialRecord]:
    """MFU descending; OOM and invalid trials last."""
    def sort_key(rec: TrialRecord):
        if rec.has_runtime:
            return (0, -(rec.mfu or 0.0), rec.time_ns, rec.config.key())
        if rec.status is TrialStatus.INVALID:
            return (2, 0.0, 0, rec.config.key())
        return (1, 0.0, 0, rec.config.key())
    return sorted(trials, key=sort_key)


def _verdict_record(config: ConfigPoint, verdict: Verdict) -> TrialRecord:
    premise = verdict.premise
    if verdict.kind == "mark_oom":
        return TrialRecord(config, TrialStatus.SKIPPED_PRUNED, provenance="inferred",
                           tactic=verdict.tactic, premise=premise.config)
    return TrialRecord(config, TrialStatus.SKIPPED_PRUNED, time_ns=premise.time_ns,
                       mfu=premise.mfu, provenance="inferred",
                       tactic=verdict.tactic, premise=premise.config)


def _evaluate_record(evaluator, config: ConfigPoint) -> TrialRecord:
    try:
        res = evaluator(config)
    except Exception as exc:
        return TrialRecord(config, TrialStatus.INVALID, error=str(exc))
    if res.oom:
        return TrialRecord(config, TrialStatus.OOM, peak_mem_bytes=res.peak_mem_bytes)
    return TrialRecord(config, TrialStatus.COMPLETED, time_ns=res.time_ns,
                       mfu=res.mfu, peak_mem_bytes=res.peak_mem_bytes)


def run_search(space: SearchSpace, evaluator: Callable[[ConfigPoint], EvalResult],
               strategy: Strategy, model: ModelSpec, cluster: ClusterSpec,
               jobs: int = 1, use_tactics: bool = True,
               stop: StopRule | None = None, max_trials: int | None = None,
               deterministic: bool = False) -> SearchResult:
    """Explore the space with pruning and early stopping; returns ranked trials."""
    configs = enumerate_space(space, model, cluster)
    history: list[TrialRecord] = []
    stopped = False

    def note(rec: TrialRecord) -> bool:
        history.append(rec)
        if stop is not None and early_stop(history, stop.window, stop.top_k):
            return True
        return bool(max_trials and len(history) >= max_trials)

    def batches() -> Iterable[list[ConfigPoint]]:
        if isinstance(strategy, EvolutionaryStrategy):
            scores = {}
            def score_of(c: ConfigPoint) -> float | None:
                return scores.get(c.key())
            for batch in strategy.ordered_run(configs, space, score_of):
                yield batch
                for rec in history:
                    if rec.has_runtime and rec.mfu is not None:
                        scores[rec.config.key()] = rec.mfu
        else:
            ordered = list(strategy.order(configs))
            size = jobs if (jobs > 1 and deterministic) else (1 if jobs == 1 else jobs)
            for start in range(0, len(ordered), size):
                yield ordered[start:start + size]

    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for batch in batches():
            if stopped:
                break
            to_run: list[ConfigPoint] = []
            for config in batch:
                verdict = apply_tactics(history, config) if use_tactics else None
                if verdict is not None:
                    if note(_verdict_record(config, verdict)):
                        stopped = True
                        break
                else:
                    to_run.append(config)
            if stopped:
                break
            if pool is None:
                for config in to_run:
                    if note(_evaluate_record(evaluator, config)):
                        stopped = True
                        break
            else:
                futures = [(c, pool.submit(_evaluate_record, evaluator, c))
                           for c in to_run]
                for config, fut in futures:
                    if note(fut.result()):
                        stopped = True
    finally:
        if pool is not None:
            pool.shutdown()

    return SearchResult(trials=history, ranked=_rank(history), stopped_early=stopped)


def selective_launch(config: ConfigPoint, cluster: ClusterSpec) -> list[int]:
    from .workload import selective_launch as _sl
    return _sl(config, cluster)

import pytest

from dltsim.cluster import ClusterSpec
from dltsim.estimate import RooflineEstimator
from dltsim.search import (
    PipelineEvaluator, SearchSpace, TrialRecord, TrialStatus, apply_tactics,
    early_stop, enumerate_space, make_strategy, run_search, selective_launch,
)
from dltsim.workload import ConfigPoint

from builders import EXACT_EFFICIENCY, exact_device


def _cfg(tp=1, pp=1, mm=1, vs=1, rc=False, sp=False, dz=False, gb=64):
    return ConfigPoint(tp, pp, mm, vs, rc, sp, dz, gb)


def _completed(cfg, time_ns=100_000, mfu=0.5):
    return TrialRecord(cfg, TrialStatus.COMPLETED, time_ns=time_ns, mfu=mfu,
                       peak_mem_bytes=1)


def _oomed(cfg):
    return TrialRecord(cfg, TrialStatus.OOM, peak_mem_bytes=99)


class TestEnumerate:
    def test_default_lattice_size_before_validity(self):
        space = SearchSpace()
        assert len(space.points()) == 4 * 4 * 5 * 3 * 2 * 2 * 2  # 1920

    def test_excluded_points_carry_reasons(self, lab_model, cluster16_exact):
        space = SearchSpace(tp=(8, 16), pp=(1,), micro_mult=(1,),
                            virtual_stages=(1, 4), global_batch=64)
        pairs = enumerate_space(space, lab_model, cluster16_exact, with_invalid=True)
        reasons = {c.key(): r for c, r in pairs}
        assert reasons[_cfg(tp=8).key()] == []
        assert any("virtual_stages" in r
                   for r in reasons[_cfg(tp=8, vs=4).key()])
        # tp=16 spans the whole cluster; pp=1 leaves dp=1: valid shape-wise,
        # but hidden 128 % 16 == 0 and seq 256 % 16 == 0, so it is valid
        assert reasons[_cfg(tp=16).key()] == []

    def test_tp_beyond_cluster_excluded(self, lab_model):
        cluster = ClusterSpec(1, 4, 2**30, exact_device())
        space = SearchSpace(tp=(8,), pp=(1,), micro_mult=(1,),
                            virtual_stages=(1,), global_batch=64)
        assert enumerate_space(space, lab_model, cluster) == []


class TestTactics:
    def test_recompute_oom_implies_no_recompute_oom(self):
        prior = _oomed(_cfg(tp=2, pp=2, rc=True))
        verdict = apply_tactics([prior], _cfg(tp=2, pp=2, rc=False))
        assert verdict is not None
        assert verdict.kind == "mark_oom"
        assert verdict.tactic == "oom-without-recompute"
        assert verdict.premise is prior

    def test_seq_parallel_oom_tactic(self):
        prior = _oomed(_cfg(tp=4, sp=True))
        verdict = apply_tactics([prior], _cfg(tp=4, sp=False))
        assert verdict.tactic == "oom-without-seq-parallel"

    def test_dist_optimizer_copies_runtime(self):
        prior = _completed(_cfg(tp=2, dz=False), time_ns=123_456)
        verdict = apply_tactics([prior], _cfg(tp=2, dz=True))
        assert verdict.kind == "copy_runtime"
        assert verdict.premise.time_ns == 123_456

    def test_more_microbatches_copies_runtime_only_without_pp(self):
        prior = _completed(_cfg(mm=1), time_ns=777)
        assert apply_tactics([prior], _cfg(mm=4)).tactic == "more-microbatches-runtime"
        prior_pp = _completed(_cfg(pp=2, mm=1, gb=64))
        assert apply_tactics([prior_pp], _cfg(pp=2, mm=4, gb=64)) is None

    def test_fewer_microbatches_not_copied(self):
        prior = _completed(_cfg(mm=4))
        assert apply_tactics([prior], _cfg(mm=1)) is None

    def test_empty_history_no_verdict(self):
        assert apply_tactics([], _cfg()) is None

    def test_unrelated_config_no_verdict(self):
        prior = _oomed(_cfg(tp=2, pp=2, rc=True))
        assert apply_tactics([prior], _cfg(tp=4, pp=2, rc=False)) is None

    def test_tactic_order_first_match_wins(self):
        cfg = _cfg(tp=2, rc=False, sp=False)
        history = [_oomed(_cfg(tp=2, rc=True, sp=False)),
                   _oomed(_cfg(tp=2, rc=False, sp=True))]
        assert apply_tactics(history, cfg).tactic == "oom-without-recompute"


class TestEarlyStop:
    def _history(self, mfus):
        return [_completed(_cfg(mm=i + 1, gb=2 * 3 * 5 * 7 * 9 * 11 * 64), mfu=m)
                for i, m in enumerate(mfus)]

    def _history_keys(self, mfus):
        # configs distinct through micro_mult values 1..n
        out = []
        for i, m in enumerate(mfus):
            cfg = ConfigPoint(1, 1, i + 1, 1, False, False, False, 10**9)
            out.append(_completed(cfg, mfu=m))
        return out

    def test_fewer_than_window_is_false(self):
        assert not early_stop(self._history_keys([0.5] * 19), window=20)

    def test_static_top_set_fires(self):
        # 5 good trials, then 20 worse ones that never crack the top 5
        mfus = [0.9, 0.8, 0.7, 0.6, 0.5] + [0.1] * 20
        assert early_stop(self._history_keys(mfus), window=20, top_k=5)

    def test_late_entrant_resets(self):
        mfus = [0.9, 0.8, 0.7, 0.6, 0.5] + [0.1] * 14 + [0.95] + [0.1] * 5
        assert not early_stop(self._history_keys(mfus), window=20, top_k=5)

    def test_oom_trials_do_not_count(self):
        history = self._history_keys([0.9, 0.8, 0.7, 0.6, 0.5] + [0.1] * 20)
        history.insert(3, _oomed(_cfg(tp=8, gb=123)))
        assert early_stop(history, window=20, top_k=5)


def _search_fixture(lab_model, cluster):
    space = SearchSpace(tp=(1, 2, 4, 8), pp=(1, 2), micro_mult=(1, 2),
                        virtual_stages=(1,), global_batch=64)
    evaluator = PipelineEvaluator(
        model=lab_model, cluster=cluster,
        estimator=RooflineEstimator(efficiency=EXACT_EFFICIENCY, overhead_ns=0),
        dispatch_overhead_ns=0)
    return space, evaluator


@pytest.fixture(scope="module")
def grid_plain(lab_model, cluster16_exact):
    space, evaluator = _search_fixture(lab_model, cluster16_exact)
    return run_search(space, evaluator, make_strategy("grid"),
                      lab_model, cluster16_exact, use_tactics=False)


@pytest.fixture(scope="module")
def grid_pruned(lab_model, cluster16_exact):
    space, evaluator = _search_fixture(lab_model, cluster16_exact)
    return run_search(space, evaluator, make_strategy("grid"),
                      lab_model, cluster16_exact, use_tactics=True)


class TestRunSearch:
    def test_grid_toy_space_all_completed(self, lab_model, cluster16_exact):
        cluster = ClusterSpec(2, 8, 2**62, exact_device())  # no memory pressure
        space = SearchSpace(tp=(2,), pp=(1, 2), micro_mult=(1,),
                            virtual_stages=(1,), act_recompute=(False,),
                            seq_parallel=(False,), dist_optimizer=(False,),
                            global_batch=64)
        _, evaluator = _search_fixture(lab_model, cluster)
        result = run_search(space, evaluator, make_strategy("grid"),
                            lab_model, cluster, use_tactics=False)
        assert len(result.trials) == 2
        assert all(t.status is TrialStatus.COMPLETED for t in result.trials)

    def test_tactics_reduce_evaluations_and_preserve_best(self, grid_plain,
                                                          grid_pruned):
        assert grid_pruned.status_breakdown().get("skipped_pruned", 0) > 0
        assert grid_plain.best.config == grid_pruned.best.config
        assert grid_plain.best.time_ns == grid_pruned.best.time_ns

    def test_pruned_verdicts_match_ground_truth(self, grid_plain, grid_pruned):
        truth = {r.config.key(): r for r in grid_plain.trials}
        checked = 0
        for rec in grid_pruned.trials:
            if rec.status is not TrialStatus.SKIPPED_PRUNED:
                continue
            gt = truth[rec.config.key()]
            if rec.time_ns is None:
                assert gt.status is TrialStatus.OOM
            else:
                assert gt.status is TrialStatus.COMPLETED
                assert rec.time_ns == gt.time_ns
            checked += 1
        assert checked > 0

    def test_random_strategy_deterministic(self, lab_model, cluster16_exact):
        _, evaluator = _search_fixture(lab_model, cluster16_exact)
        space = SearchSpace(tp=(2, 4), pp=(1, 2), micro_mult=(1,),
                            virtual_stages=(1,), seq_parallel=(False,),
                            global_batch=64)
        a = run_search(space, evaluator, make_strategy("random", seed=7),
                       lab_model, cluster16_exact)
        b = run_search(space, evaluator, make_strategy("random", seed=7),
                       lab_model, cluster16_exact)
        assert [(r.config.key(), r.status.value, r.time_ns) for r in a.trials] == \
               [(r.config.key(), r.status.value, r.time_ns) for r in b.trials]
        assert a.best.config == b.best.config

    def test_evolutionary_covers_space_and_is_deterministic(self, lab_model,
                                                            cluster16_exact):
        _, evaluator = _search_fixture(lab_model, cluster16_exact)
        space = SearchSpace(tp=(2, 4), pp=(1, 2), micro_mult=(1, 2),
                            virtual_stages=(1,), seq_parallel=(False,),
                            global_batch=64)
        a = run_search(space, evaluator, make_strategy("evolutionary", seed=3),
                       lab_model, cluster16_exact, use_tactics=False)
        b = run_search(space, evaluator, make_strategy("evolutionary", seed=3),
                       lab_model, cluster16_exact, use_tactics=False)
        n_valid = len(enumerate_space(space, lab_model, cluster16_exact))
        assert len(a.trials) == n_valid
        assert [r.config.key() for r in a.trials] == [r.config.key() for r in b.trials]

    def test_evaluator_failure_marks_invalid(self, lab_model, cluster16_exact):
        def broken(config):
            raise RuntimeError("boom")
        space = SearchSpace(tp=(1,), pp=(1,), micro_mult=(1,),
                            virtual_stages=(1,), act_recompute=(False,),
                            seq_parallel=(False,), dist_optimizer=(False,),
                            global_batch=64)
        result = run_search(space, broken, make_strategy("grid"),
                            lab_model, cluster16_exact)
        assert result.trials[0].status is TrialStatus.INVALID
        assert "boom" in result.trials[0].error

    def test_max_trials_budget(self, lab_model, cluster16_exact):
        space, evaluator = _search_fixture(lab_model, cluster16_exact)
        result = run_search(space, evaluator, make_strategy("grid"),
                            lab_model, cluster16_exact, max_trials=5)
        assert len(result.trials) == 5

    def test_ranking_mfu_matches_inverse_time(self, grid_plain):
        """At fixed model flops, MFU order must equal 1/time order."""
        scored = [r for r in grid_plain.ranked if r.has_runtime]
        times = [r.time_ns for r in scored]
        assert times == sorted(times)

    def test_oom_and_invalid_rank_last(self, grid_pruned):
        seen_dead = False
        for rec in grid_pruned.ranked:
            if not rec.has_runtime:
                seen_dead = True
            else:
                assert not seen_dead


class TestEarlyStopIntegration:
    def test_stop_rule_halts_search(self, lab_model, cluster16_exact):
        from dltsim.search import StopRule
        _, evaluator = _search_fixture(lab_model, cluster16_exact)
        space = SearchSpace(tp=(1, 2, 4, 8), pp=(1, 2), micro_mult=(1, 2),
                            virtual_stages=(1,), global_batch=64)
        full = run_search(space, evaluator, make_strategy("grid"),
                          lab_model, cluster16_exact)
        stopped = run_search(space, evaluator, make_strategy("grid"),
                             lab_model, cluster16_exact,
                             stop=StopRule(window=8, top_k=2))
        assert stopped.stopped_early
        assert len(stopped.trials) < len(full.trials)


class TestTacticPremises:
    def test_recompute_strictly_reduces_peak_memory(self, lab_model, cluster16_exact):
        """The soundness premise behind the OOM-domination tactic: peak memory
        with recomputation off is >= with it on, for every config."""
        from dltsim.collate import collate
        from dltsim.estimate import annotate as _annotate
        from dltsim.sim import simulate as _simulate
        from dltsim.workload import default_schedule, generate_representatives
        cluster = ClusterSpec(2, 8, 2**62, exact_device())
        est = RooflineEstimator(efficiency=EXACT_EFFICIENCY, overhead_ns=0)
        for tp, pp, sp in ((1, 1, False), (2, 2, False), (4, 1, True), (8, 2, True)):
            peaks = {}
            for rc in (False, True):
                cfg = _cfg(tp=tp, pp=pp, rc=rc, sp=sp, gb=64)
                traces, exp = generate_representatives(
                    lab_model, cfg, cluster, default_schedule(cfg),
                    dispatch_overhead_ns=0)
                rep = _simulate(_annotate(collate(traces, exp, cluster), est))
                peaks[rc] = rep.peak_mem_bytes
            assert peaks[False] >= peaks[True], (tp, pp, sp)


class TestConcurrentTrials:
    def test_process_pool_barrier_mode_matches_serial_best(self, lab_model,
                                                           cluster16_exact):
        _, evaluator = _search_fixture(lab_model, cluster16_exact)
        space = SearchSpace(tp=(2, 4), pp=(1, 2), micro_mult=(1,),
                            virtual_stages=(1,), seq_parallel=(False,),
                            global_batch=64)
        serial = run_search(space, evaluator, make_strategy("grid"),
                            lab_model, cluster16_exact)
        par1 = run_search(space, evaluator, make_strategy("grid"),
                          lab_model, cluster16_exact, jobs=2, deterministic=True)
        par2 = run_search(space, evaluator, make_strategy("grid"),
                          lab_model, cluster16_exact, jobs=2, deterministic=True)
        assert [(r.config.key(), r.status.value, r.time_ns) for r in par1.trials] == \
               [(r.config.key(), r.status.value, r.time_ns) for r in par2.trials]
        assert par1.best.config == serial.best.config
        assert par1.best.time_ns == serial.best.time_ns


class TestSelectiveLaunch:
    def test_tp8_pp8_large_dp(self):
        cluster = ClusterSpec(2048, 8, 2**40, exact_device())
        ranks = selective_launch(_cfg(tp=8, pp=8, gb=16384), cluster)
        assert len(ranks) == 8

    def test_dp_only_single_rank(self):
        cluster = ClusterSpec(2, 8, 2**40, exact_device())
        assert selective_launch(_cfg(gb=64), cluster) == [0]

    def test_pp4_one_per_stage(self):
        cluster = ClusterSpec(1, 4, 2**40, exact_device())
        assert len(selective_launch(_cfg(pp=4, gb=64), cluster)) == 4

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from dltsim.cluster import DeviceClass, LinkClass
from dltsim.collate import collate
from dltsim.estimate import (
    EstimationError, ProfileRow, ProfileTable, RooflineEstimator,
    TableEstimator, annotate, collective_estimate,
)
from dltsim.trace import KernelAttrs
from dltsim.workload import (ConfigPoint, ModelSpec, ScheduleKind,
                             generate_trace, profile_mode_annotate,
                             unique_workers)

from builders import toy_cluster, toy_device, FixedEstimator

GIGA = 1_000_000_000


def _attrs(flops=0, bytes_moved=0, dtype="bf16", **dims):
    return KernelAttrs.make(dims, dtype, flops, bytes_moved)


class TestRoofline:
    def test_memory_bound_limb(self):
        dev = DeviceClass("d", {"bf16": GIGA}, GIGA,
                          {"intra_host": LinkClass(0, GIGA),
                           "inter_host": LinkClass(0, GIGA)})
        est = RooflineEstimator(overhead_ns=500)
        # 1 GB at 1 GB/s = 1 s, plus overhead
        got = est.estimate_kernel("memcpy_h2d", _attrs(bytes_moved=GIGA), dev)
        assert got == 1_000_000_000 + 500

    def test_gemm_compute_limb_matches_fraction_oracle(self):
        # 4096^3 gemm at 100 TFLOP/s peak and 0.6 efficiency
        dev = DeviceClass("d", {"bf16": 100 * 10**12}, GIGA,
                          {"intra_host": LinkClass(0, GIGA),
                           "inter_host": LinkClass(0, GIGA)})
        est = RooflineEstimator(overhead_ns=0)
        flops = 2 * 4096**3
        want = math.ceil(Fraction(flops * 10**9) / (100 * 10**12 * Fraction(3, 5)))
        got = est.estimate_kernel("gemm", _attrs(flops=flops, bytes_moved=1), dev)
        assert got == want == 2290650  # ~2.29 ms

    def test_zero_work_is_overhead_only(self):
        est = RooflineEstimator(overhead_ns=777)
        assert est.estimate_kernel("gemm", _attrs(), toy_device()) == 777

    def test_unknown_op_uses_half_efficiency(self):
        dev = toy_device()
        est = RooflineEstimator(overhead_ns=0)
        flops = 10**12
        known = est.estimate_kernel("gemm", _attrs(flops=flops), dev)
        unknown = est.estimate_kernel("mystery", _attrs(flops=flops), dev)
        assert est.unknown_op("mystery") and not est.unknown_op("gemm")
        assert unknown == math.ceil(Fraction(flops * 10**9) /
                                    (dev.peak_flops["bf16"] * Fraction(1, 2)))
        assert unknown > known

    def test_missing_dtype_raises(self):
        est = RooflineEstimator()
        with pytest.raises(EstimationError, match="no peak rate"):
            est.estimate_kernel("gemm", _attrs(flops=10, dtype="fp16x"), toy_device())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 1 << 40), st.integers(0, 1 << 40),
           st.integers(0, 1 << 40), st.integers(0, 1 << 40))
    def test_monotone_in_flops_and_bytes(self, f1, f2, b1, b2):
        est = RooflineEstimator()
        dev = toy_device()
        lo = est.estimate_kernel("gemm", _attrs(flops=min(f1, f2), bytes_moved=min(b1, b2)), dev)
        hi = est.estimate_kernel("gemm", _attrs(flops=max(f1, f2), bytes_moved=max(b1, b2)), dev)
        assert lo <= hi


class TestCollectiveEstimate:
    def test_single_rank_costs_nothing(self):
        dev = toy_device()
        for kind in ("AllReduce", "AllGather", "ReduceScatter", "Broadcast", "SendRecv"):
            assert collective_estimate(kind, 1 << 30, 1, "intra_host", dev) == 0

    def test_ring_allreduce_closed_form(self):
        # n=4, 1 GiB, beta = 100 GiB/s, alpha = 0: (2*3/4) * S / beta = 15 ms
        dev = DeviceClass("d", {"bf16": GIGA}, GIGA,
                          {"intra_host": LinkClass(0, 100 * 2**30),
                           "inter_host": LinkClass(0, 100 * 2**30)})
        got = collective_estimate("AllReduce", 2**30, 4, "intra_host", dev)
        assert got == 15_000_000

    def test_doubling_bytes_doubles_duration_at_zero_alpha(self):
        dev = DeviceClass("d", {"bf16": GIGA}, GIGA,
                          {"intra_host": LinkClass(0, 128 * GIGA),
                           "inter_host": LinkClass(0, 128 * GIGA)})
        one = collective_estimate("AllGather", 1 << 20, 8, "intra_host", dev)
        two = collective_estimate("AllGather", 1 << 21, 8, "intra_host", dev)
        assert two == 2 * one

    def test_mixed_topology_uses_inter_host_link(self):
        dev = toy_device()
        mixed = collective_estimate("AllReduce", 1 << 20, 4, "mixed", dev)
        inter = collective_estimate("AllReduce", 1 << 20, 4, "inter_host", dev)
        intra = collective_estimate("AllReduce", 1 << 20, 4, "intra_host", dev)
        assert mixed == inter > intra

    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from(["AllReduce", "AllGather", "ReduceScatter",
                            "Broadcast", "SendRecv"]),
           st.integers(1, 1 << 34), st.integers(1, 1 << 34),
           st.integers(1, 64))
    def test_monotone_in_bytes(self, kind, b1, b2, n):
        dev = toy_device()
        lo = collective_estimate(kind, min(b1, b2), n, "inter_host", dev)
        hi = collective_estimate(kind, max(b1, b2), n, "inter_host", dev)
        assert lo <= hi


class TestProfileTable:
    def test_exact_match_returns_row(self):
        a = _attrs(flops=1000, m=2)
        table = ProfileTable([ProfileRow("gemm", a, "toy", 4242)])
        assert table.lookup("gemm", a, "toy") == 4242

    def test_geometric_midpoint(self):
        t = ProfileTable([
            ProfileRow("gemm", _attrs(flops=1000), "toy", 10_000),
            ProfileRow("gemm", _attrs(flops=4000), "toy", 40_000),
        ])
        # log-midpoint of work 1000 and 4000 is 2000; durations 10us and 40us
        # interpolate geometrically to 20us
        assert t.lookup("gemm", _attrs(flops=2000), "toy") == 20_000

    def test_single_row_scales_proportionally(self):
        t = ProfileTable([ProfileRow("gemm", _attrs(flops=1000), "toy", 5000)])
        assert t.lookup("gemm", _attrs(flops=3000), "toy") == 15_000

    def test_duplicate_conflicting_keys_rejected(self):
        a = _attrs(flops=10)
        t = ProfileTable([ProfileRow("gemm", a, "toy", 100)])
        with pytest.raises(EstimationError, match="conflicting"):
            t.add(ProfileRow("gemm", a, "toy", 200))

    def test_unknown_op_delegates_to_roofline(self):
        table = ProfileTable([ProfileRow("gemm", _attrs(flops=1000), "toy", 5000)])
        est = TableEstimator(table, RooflineEstimator(overhead_ns=0))
        dev = toy_device()
        got = est.estimate_kernel("softmax", _attrs(flops=8 * GIGA), dev)
        want = RooflineEstimator(overhead_ns=0).estimate_kernel(
            "softmax", _attrs(flops=8 * GIGA), dev)
        assert got == want
        assert est.unknown_op("softmax")

    def test_save_load_round_trip(self, tmp_path):
        rows = [ProfileRow("gemm", _attrs(flops=1000, m=4, n=2, k=8), "toy", 123),
                ProfileRow("memset", _attrs(bytes_moved=64, dtype="fp32"), "toy", 77)]
        t = ProfileTable(rows)
        path = str(tmp_path / "prof.table")
        t.save(path)
        loaded = ProfileTable.load(path)
        assert [(r.op_kind, r.attrs, r.device_class, r.duration_ns) for r in loaded.rows] == \
               [(r.op_kind, r.attrs, r.device_class, r.duration_ns) for r in rows]


class TestAnnotate:
    @pytest.fixture
    def small_job(self):
        model = ModelSpec("m", 2, 64, 32, 128)
        cluster = toy_cluster(1, 2)
        config = ConfigPoint(2, 1, 1, 1, False, False, False, 2)
        reps, expansion = unique_workers(config, cluster)
        traces = [generate_trace(model, config, cluster,
                                 ScheduleKind.ONE_F_ONE_B, r) for r in reps]
        return collate(traces, expansion, cluster)

    def test_constant_estimator_annotates_everything(self, small_job):
        ann = annotate(small_job, FixedEstimator(default_ns=1000, coll_ns=10))
        assert all(v == 1000 for v in ann.kernel_ns.values())
        assert set(ann.wire_ns) == set(small_job.calls)
        assert all(v == 10 for v in ann.wire_ns.values())

    def test_annotation_is_pure(self, small_job):
        est = RooflineEstimator()
        a = annotate(small_job, est)
        b = annotate(small_job, est)
        assert a.kernel_ns == b.kernel_ns and a.wire_ns == b.wire_ns

    def test_oracle_closure_on_table(self, small_job):
        """A table built from the trace's own oracle rows reproduces the
        oracle durations exactly through the estimator path."""
        dev = small_job.cluster.device
        base = RooflineEstimator()
        oracle = lambda op, attrs: base.estimate_kernel(op, attrs, dev)
        table = ProfileTable()
        for rank in small_job.reps:
            for row in profile_mode_annotate(small_job.reps[rank], oracle, dev.name).rows:
                table.add(row)
        ann_table = annotate(small_job, TableEstimator(table))
        ann_oracle = annotate(small_job, base)
        assert ann_table.kernel_ns == ann_oracle.kernel_ns

    def test_unknown_op_warning_surfaces(self, small_job):
        est = TableEstimator(ProfileTable([ProfileRow("gemm", _attrs(flops=10), "toy", 5)]))
        ann = annotate(small_job, est)
        assert any("fallback" in w for w in ann.warnings)

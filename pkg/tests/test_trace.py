import io

import pytest
from hypothesis import given, settings, strategies as st

from dltsim.cluster import ClusterSpec, load_device_preset
from dltsim.trace import (
    Collective, CommInit, EventRecord, HostGap, KernelAttrs, KernelLaunch,
    MemAlloc, MemFree, StreamWaitEvent, TraceParseError, TraceValidationError,
    WorkerTrace, dumps_trace, loads_trace, validate_trace,
)
from dltsim.workload import (ConfigPoint, ModelSpec, default_schedule,
                             generate_trace, unique_workers, validate_config)


def _trace(*events) -> WorkerTrace:
    return WorkerTrace(0, 0, 0, tuple(events))


K = KernelAttrs.make({"m": 4, "k": 8, "n": 2}, "bf16", 128, 64)


class TestSerialization:
    def test_empty_trace_is_header_only(self):
        text = dumps_trace(_trace())
        assert text == "dltsim-trace v1 rank=0 host=0 device=0\n"

    def test_three_events_three_lines(self):
        t = _trace(HostGap(5), MemAlloc(0, 10), MemFree(0))
        lines = dumps_trace(t).splitlines()
        assert len(lines) == 4
        assert lines[1] == "0 HostGap dur=5"
        assert lines[2] == "1 MemAlloc id=0 bytes=10"
        assert lines[3] == "2 MemFree id=0"

    def test_kernel_attrs_sorted_and_prefixed(self):
        t = _trace(KernelLaunch(0, "gemm", K))
        line = dumps_trace(t).splitlines()[1]
        assert line == "0 KernelLaunch stream=0 op=gemm dtype=bf16 flops=128 bytes=64 a.k=8 a.m=4 a.n=2"

    def test_round_trip_hand_trace(self):
        t = _trace(
            CommInit("tp.p0.d0", 2, 1),
            HostGap(100),
            KernelLaunch(0, "gemm", K),
            Collective(1, "tp.p0.d0", 0, "AllReduce", 4096, 2),
            EventRecord(0, 3, 0),
            StreamWaitEvent(1, 3, 0),
        )
        assert loads_trace(dumps_trace(t)) == t

    def test_parse_reports_line_numbers(self):
        text = "dltsim-trace v1 rank=0 host=0 device=0\n0 HostGap dur=zzz\n"
        with pytest.raises(TraceParseError, match="line 2"):
            loads_trace(text)

    def test_non_monotone_seq_rejected(self):
        text = ("dltsim-trace v1 rank=0 host=0 device=0\n"
                "0 HostGap dur=1\n2 HostGap dur=1\n")
        with pytest.raises(TraceParseError, match="non-monotone seq"):
            loads_trace(text)

    def test_unknown_kind_rejected(self):
        with pytest.raises(TraceParseError, match="unknown event kind"):
            loads_trace("dltsim-trace v1 rank=0 host=0 device=0\n0 Quux a=1\n")

    def test_parse_rejects_invariant_violations(self):
        text = ("dltsim-trace v1 rank=0 host=0 device=0\n"
                "0 Collective stream=0 comm=c1 idx=0 kind=AllReduce bytes=8 nranks=2\n")
        with pytest.raises(TraceValidationError, match="unknown-comm"):
            loads_trace(text)


class TestValidation:
    def test_well_formed_empty(self):
        assert validate_trace(_trace()) == []

    def test_free_of_unallocated(self):
        v = validate_trace(_trace(MemFree(7)))
        assert [x.rule for x in v] == ["free-unallocated"]

    def test_double_free_flags_second(self):
        v = validate_trace(_trace(MemAlloc(1, 8), MemFree(1), MemFree(1)))
        assert [(x.seq, x.rule) for x in v] == [(2, "double-free")]

    def test_wait_on_unrecorded_event(self):
        v = validate_trace(_trace(StreamWaitEvent(0, 5, 0)))
        assert v[0].rule == "unrecorded-event"

    def test_wait_on_stale_version(self):
        t = _trace(EventRecord(0, 5, 0), StreamWaitEvent(1, 5, 1))
        assert validate_trace(t)[0].rule == "unrecorded-event"

    def test_event_versions_must_count_up(self):
        t = _trace(EventRecord(0, 5, 0), EventRecord(0, 5, 2))
        assert validate_trace(t)[0].rule == "event-version-order"

    def test_collective_without_comm_init(self):
        t = _trace(Collective(0, "c9", 0, "AllReduce", 8, 2))
        assert validate_trace(t)[0].rule == "unknown-comm"

    def test_call_idx_gap(self):
        t = _trace(CommInit("c1", 2, 0),
                   Collective(0, "c1", 0, "AllReduce", 8, 2),
                   Collective(0, "c1", 2, "AllReduce", 8, 2))
        assert validate_trace(t)[0].rule == "call-idx-order"

    def test_nranks_mismatch(self):
        t = _trace(CommInit("c1", 4, 0), Collective(0, "c1", 0, "AllReduce", 8, 2))
        assert validate_trace(t)[0].rule == "nranks-mismatch"

    def test_my_rank_range(self):
        assert validate_trace(_trace(CommInit("c1", 2, 2)))[0].rule == "my-rank-range"

    def test_negative_gap(self):
        assert validate_trace(_trace(HostGap(-1)))[0].rule == "negative-duration"


# Round-trip and validity over the real generator, as properties.

_MODEL = ModelSpec("prop", num_layers=4, hidden_size=64, seq_len=32, vocab_size=128)
_CLUSTER = ClusterSpec(1, 4, 2**40, load_device_preset("fast"))
_CONFIGS = [
    c for c in (
        ConfigPoint(tp, pp, mm, vs, rc, sp, dz, 16)
        for tp in (1, 2) for pp in (1, 2) for mm in (1, 2) for vs in (1, 2)
        for rc in (False, True) for sp in (False, True) for dz in (False, True)
    ) if not validate_config(_MODEL, c, _CLUSTER)
]


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(_CONFIGS), st.integers(0, 2**32 - 1), st.data())
def test_generated_traces_round_trip_and_validate(config, seed, data):
    reps, _ = unique_workers(config, _CLUSTER)
    rank = data.draw(st.sampled_from(reps))
    trace = generate_trace(_MODEL, config, _CLUSTER, default_schedule(config),
                           rank, seed)
    assert validate_trace(trace) == []
    assert loads_trace(dumps_trace(trace)) == trace


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(_CONFIGS))
def test_event_versions_form_contiguous_sequences(config):
    trace = generate_trace(_MODEL, config, _CLUSTER, default_schedule(config),
                           unique_workers(config, _CLUSTER)[0][0], 0)
    seen: dict[int, int] = {}
    for ev in trace.events:
        if isinstance(ev, EventRecord):
            assert ev.version == seen.get(ev.event_id, 0)
            seen[ev.event_id] = ev.version + 1


def test_generation_is_deterministic():
    config = _CONFIGS[0]
    a = generate_trace(_MODEL, config, _CLUSTER, default_schedule(config), 0, 7)
    b = generate_trace(_MODEL, config, _CLUSTER, default_schedule(config), 0, 7)
    assert dumps_trace(a) == dumps_trace(b)

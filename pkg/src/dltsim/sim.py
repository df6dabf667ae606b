"""Discrete-event simulation of an annotated job trace over a cluster.

Each worker's host replays its trace in order: host gaps block the dispatch
queue for their duration, host-side synchronization ops (Event/Stream/Device
Synchronize) block it conditionally, memory ops are accounted at dispatch
time, and device ops are enqueued on their stream's FIFO.  Streams execute
at most one timed op at a time; a scheduling pass after every completed event
starts work on every free stream and runs zero-duration bookkeeping
(EventRecord firing, satisfied StreamWaitEvents) to a fixed point at the
current timestamp.

Synchronization uses two wait maps:

* (rank, event_id, version) -> blocked streams/hosts; an EventRecord firing
  releases them, and a wait on an already-fired pair is a no-op;
* (comm_id, call_idx) -> arrived members; the last member's arrival schedules
  one end event per member at arrival time + the group's wire duration, so
  members stall individually but complete in lockstep.

Ties in the event queue break by insertion order, which makes a simulation a
pure function of its inputs.  An exhausted queue with blocked work remaining
is reported as a deadlock with the full wait-state residue; it signals an
inconsistent trace, not a timing outcome.

Memory is tracked at host-dispatch time.  Exceeding device capacity flags the
report as OOM (with the first offending event) but the simulation runs to
completion, so the search can still classify the config.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from .cluster import ClusterSpec
from .collate import JobTrace
from .estimate import AnnotatedJob
from .trace import (
    Collective, CommInit, DeviceSynchronize, EventRecord, EventSynchronize,
    HostGap, KernelLaunch, MemAlloc, MemFree, Memcpy, Memset,
    StreamSynchronize, StreamWaitEvent,
)


class SimDeadlockError(Exception):
    """Queue drained with blocked work left; carries the wait-state residue."""


@dataclass
class RankStats:
    compute_busy_ns: int = 0
    comm_busy_ns: int = 0
    exposed_comm_ns: int = 0
    idle_ns: int = 0
    peak_mem_bytes: int = 0


@dataclass
class SimReport:
    total_ns: int
    per_rank: dict[int, RankStats]
    oom: bool
    first_oom: tuple[int, int] | None          # (rank, seq)
    dispatched_ops: int
    completed_ops: int
    mfu: float | None = None
    timeline: list[tuple[int, int, str, int, int]] = field(default_factory=list)

    @property
    def peak_mem_bytes(self) -> int:
        return max((s.peak_mem_bytes for s in self.per_rank.values()), default=0)

    @property
    def exposed_comm_ns(self) -> int:
        return max((s.exposed_comm_ns for s in self.per_rank.values()), default=0)

    def to_dict(self) -> dict:
        return {
            "total_ns": self.total_ns,
            "oom": self.oom,
            "first_oom": list(self.first_oom) if self.first_oom else None,
            "mfu": self.mfu,
            "peak_mem_bytes": self.peak_mem_bytes,
            "dispatched_ops": self.dispatched_ops,
            "completed_ops": self.completed_ops,
            "per_rank": {
                str(r): {
                    "compute_busy_ns": s.compute_busy_ns,
                    "comm_busy_ns": s.comm_busy_ns,
                    "exposed_comm_ns": s.exposed_comm_ns,
                    "idle_ns": s.idle_ns,
                    "peak_mem_bytes": s.peak_mem_bytes,
                } for r, s in sorted(self.per_rank.items())
            },
        }

    def to_timeline_json(self) -> str:
        """Standard trace-viewer event format: one complete event per op."""
        events = [
            {"name": name, "ph": "X", "pid": rank, "tid": stream,
             "ts": start / 1000.0, "dur": (end - start) / 1000.0}
            for rank, stream, name, start, end in self.timeline
        ]
        return json.dumps({"traceEvents": events}, sort_keys=True)


# Compiled op tags.
_GAP, _MEM, _KERN, _COLL, _REC, _WAIT, _ESYNC, _SSYNC, _DSYNC = range(9)


class _Stream:
    __slots__ = ("queue", "running", "start", "wait_key")

    def __init__(self):
        self.queue: deque = deque()
        self.running = None          # compiled op occupying the stream
        self.start = 0               # start (or collective arrival) time
        self.wait_key = None         # (rank, event_id, version) stalling us

    def drained(self) -> bool:
        return self.running is None and not self.queue and self.wait_key is None


class _Host:
    __slots__ = ("ops", "idx", "blocked", "finished")

    def __init__(self, ops: list):
        self.ops = ops
        self.idx = 0
        self.blocked = None          # ("gap"|"event"|"ssync"|"dsync", detail)
        self.finished = not ops


def _compile_rank(rank: int, job: JobTrace, ann: AnnotatedJob) -> list:
    """Flatten one rank's replayed trace into fast dispatch tuples."""
    rep = job.rep_of(rank)
    trace = job.reps[rep]
    cm = job.comm_map[rank]
    kernel_ns = ann.kernel_ns
    ops = []
    alloc_bytes: dict[int, int] = {}
    for seq, ev in enumerate(trace.events):
        if isinstance(ev, HostGap):
            ops.append((_GAP, ev.duration_ns))
        elif isinstance(ev, KernelLaunch):
            ops.append((_KERN, ev.stream, kernel_ns[(rep, seq)], ev.op_kind, seq))
        elif isinstance(ev, Memcpy):
            ops.append((_KERN, ev.stream, kernel_ns[(rep, seq)], f"memcpy_{ev.direction.lower()}", seq))
        elif isinstance(ev, Memset):
            ops.append((_KERN, ev.stream, kernel_ns[(rep, seq)], "memset", seq))
        elif isinstance(ev, MemAlloc):
            alloc_bytes[ev.alloc_id] = ev.bytes
            ops.append((_MEM, ev.bytes, seq))
        elif isinstance(ev, MemFree):
            ops.append((_MEM, -alloc_bytes[ev.alloc_id], seq))
        elif isinstance(ev, CommInit):
            continue
        elif isinstance(ev, Collective):
            comm = cm[ev.comm_id][0]
            ops.append((_COLL, ev.stream, (comm, ev.call_idx), ev.kind, seq))
        elif isinstance(ev, EventRecord):
            ops.append((_REC, ev.stream, ev.event_id, ev.version))
        elif isinstance(ev, StreamWaitEvent):
            ops.append((_WAIT, ev.stream, ev.event_id, ev.version))
        elif isinstance(ev, EventSynchronize):
            ops.append((_ESYNC, ev.event_id, ev.version))
        elif isinstance(ev, StreamSynchronize):
            ops.append((_SSYNC, ev.stream))
        elif isinstance(ev, DeviceSynchronize):
            ops.append((_DSYNC,))
        else:
            raise TypeError(f"unhandled event {type(ev)!r}")
    return ops


class _Sim:
    def __init__(self, ann: AnnotatedJob, cluster: ClusterSpec, record_timeline: bool):
        self.job = ann.job
        self.ann = ann
        self.cluster = cluster
        self.record_timeline = record_timeline
        self.ranks = self.job.all_ranks()
        self.hosts = {r: _Host(_compile_rank(r, self.job, ann)) for r in self.ranks}
        self.streams: dict[int, dict[int, _Stream]] = {r: {} for r in self.ranks}
        self.heap: list = []
        self.tie = 0
        self.now = 0
        self.max_t = 0
        self.fired: set[tuple[int, int, int]] = set()
        self.event_waiters: dict[tuple[int, int, int], list] = {}
        self.arrivals: dict[tuple[str, int], list] = {}
        self.worklist: deque = deque()
        self.on_worklist: set = set()
        self.mem = {r: 0 for r in self.ranks}
        self.peak = {r: 0 for r in self.ranks}
        self.first_oom: tuple[int, int] | None = None
        self.dispatched = 0
        self.completed = 0
        self.intervals: dict[int, list[tuple[str, int, str, int, int]]] = {
            r: [] for r in self.ranks}

    # -- queue helpers --

    def _push(self, t: int, kind: str, rank: int, stream: int = -1) -> None:
        self.tie += 1
        heapq.heappush(self.heap, (t, self.tie, kind, rank, stream))

    def _stream(self, rank: int, s: int) -> _Stream:
        st = self.streams[rank].get(s)
        if st is None:
            st = self.streams[rank][s] = _Stream()
        return st

    def _mark(self, rank: int, s: int) -> None:
        if (rank, s) not in self.on_worklist:
            self.on_worklist.add((rank, s))
            self.worklist.append((rank, s))

    # -- host replay --

    def _advance_host(self, rank: int) -> None:
        host = self.hosts[rank]
        host.blocked = None
        ops = host.ops
        while host.idx < len(ops):
            op = ops[host.idx]
            tag = op[0]
            if tag == _GAP:
                host.idx += 1
                if op[1] > 0:
                    host.blocked = ("gap", None)
                    self._push(self.now + op[1], "host", rank)
                    return
            elif tag == _MEM:
                self.mem[rank] += op[1]
                if self.mem[rank] > self.peak[rank]:
                    self.peak[rank] = self.mem[rank]
                if (self.mem[rank] > self.cluster.device_memory_bytes
                        and self.first_oom is None):
                    self.first_oom = (rank, op[2])
                host.idx += 1
            elif tag == _ESYNC:
                key = (rank, op[1], op[2])
                if key in self.fired:
                    host.idx += 1
                else:
                    host.blocked = ("event", key)
                    self.event_waiters.setdefault(key, []).append(("h", rank))
                    return
            elif tag == _SSYNC:
                st = self.streams[rank].get(op[1])
                if st is None or st.drained():
                    host.idx += 1
                else:
                    host.blocked = ("ssync", op[1])
                    return
            elif tag == _DSYNC:
                if all(st.drained() for st in self.streams[rank].values()):
                    host.idx += 1
                else:
                    host.blocked = ("dsync", None)
                    return
            else:
                # Device op: enqueue on its stream, keep dispatching.
                self._stream(rank, op[1]).queue.append(op)
                self.dispatched += 1
                self._mark(rank, op[1])
                host.idx += 1
        host.finished = True

    def _check_host_drain(self, rank: int) -> None:
        host = self.hosts[rank]
        if host.blocked is None or host.finished:
            return
        kind, detail = host.blocked
        if kind == "ssync":
            st = self.streams[rank].get(detail)
            if st is None or st.drained():
                self._advance_host(rank)
        elif kind == "dsync":
            if all(st.drained() for st in self.streams[rank].values()):
                self._advance_host(rank)

    # -- stream execution --

    def _fire(self, rank: int, event_id: int, version: int) -> None:
        key = (rank, event_id, version)
        self.fired.add(key)
        for waiter in self.event_waiters.pop(key, []):
            if waiter[0] == "s":
                _, r2, s2 = waiter
                st = self._stream(r2, s2)
                if st.wait_key == key:
                    st.wait_key = None
                    st.queue.popleft()      # the wait token at the front
                    self.completed += 1
                    self._mark(r2, s2)
            else:
                self._advance_host(waiter[1])

    def _try_start(self, rank: int, s: int) -> None:
        st = self._stream(rank, s)
        while st.running is None and st.wait_key is None and st.queue:
            op = st.queue[0]
            tag = op[0]
            if tag == _REC:
                st.queue.popleft()
                self.completed += 1
                self._fire(rank, op[2], op[3])
            elif tag == _WAIT:
                key = (rank, op[2], op[3])
                if key in self.fired:
                    st.queue.popleft()
                    self.completed += 1
                else:
                    st.wait_key = key
                    self.event_waiters.setdefault(key, []).append(("s", rank, s))
                    break
            elif tag == _KERN:
                st.queue.popleft()
                st.running = op
                st.start = self.now
                self._push(self.now + op[2], "end", rank, s)
                break
            elif tag == _COLL:
                st.queue.popleft()
                st.running = op
                st.start = self.now
                gkey = op[2]
                members = self.arrivals.setdefault(gkey, [])
                members.append((rank, s))
                group = self.job.groups[gkey[0]]
                if len(members) > group.nranks:
                    raise RuntimeError(
                        f"internal error: {len(members)} arrivals on {gkey}, "
                        f"group has {group.nranks}")
                if len(members) == group.nranks:
                    end = self.now + self.ann.wire_ns[gkey]
                    for r2, s2 in members:
                        self._push(end, "end", r2, s2)
                    del self.arrivals[gkey]
                break
            else:
                raise RuntimeError(f"internal error: op tag {tag} on stream")
        if st.drained():
            self._check_host_drain(rank)

    def _pump(self) -> None:
        while self.worklist:
            rank, s = self.worklist.popleft()
            self.on_worklist.discard((rank, s))
            self._try_start(rank, s)

    # -- main loop --

    def run(self) -> SimReport:
        for rank in self.ranks:
            self._advance_host(rank)
        self._pump()

        while self.heap:
            t, _, kind, rank, s = heapq.heappop(self.heap)
            self.now = t
            if t > self.max_t:
                self.max_t = t
            if kind == "host":
                self._advance_host(rank)
            else:  # end of a timed op
                st = self.streams[rank][s]
                op = st.running
                st.running = None
                self.completed += 1
                cls = "comm" if op[0] == _COLL else "compute"
                self.intervals[rank].append((cls, s, op[3], st.start, t))
                self._mark(rank, s)
            self._pump()

        self._check_residue()
        return self._report()

    def _check_residue(self) -> None:
        stuck = []
        for rank in self.ranks:
            host = self.hosts[rank]
            if not host.finished:
                stuck.append(f"rank {rank}: host blocked on {host.blocked}")
            for s, st in sorted(self.streams[rank].items()):
                if st.wait_key is not None:
                    stuck.append(f"rank {rank} stream {s}: waiting on event {st.wait_key}")
                elif st.running is not None and st.running[0] == _COLL:
                    stuck.append(f"rank {rank} stream {s}: stalled in collective "
                                 f"{st.running[2]}")
                elif st.queue or st.running is not None:
                    stuck.append(f"rank {rank} stream {s}: {len(st.queue)} ops queued")
        for gkey, members in sorted(self.arrivals.items()):
            need = self.job.groups[gkey[0]].nranks
            stuck.append(f"collective {gkey}: {len(members)}/{need} arrived "
                         f"({sorted(r for r, _ in members)})")
        if stuck:
            raise SimDeadlockError(
                "simulation deadlocked with blocked work:\n  " + "\n  ".join(stuck))

    # -- metrics --

    def _report(self) -> SimReport:
        total = self.max_t
        per_rank: dict[int, RankStats] = {}
        timeline: list[tuple[int, int, str, int, int]] = []
        for rank in self.ranks:
            ivs = self.intervals[rank]
            compute = _union_len([(a, b) for cls, _, _, a, b in ivs if cls == "compute"])
            comm_iv = _merge([(a, b) for cls, _, _, a, b in ivs if cls == "comm"])
            comm = sum(b - a for a, b in comm_iv)
            exposed = _subtract_len(
                comm_iv, _merge([(a, b) for cls, _, _, a, b in ivs if cls == "compute"]))
            busy = _union_len([(a, b) for _, _, _, a, b in ivs])
            per_rank[rank] = RankStats(
                compute_busy_ns=compute,
                comm_busy_ns=comm,
                exposed_comm_ns=exposed,
                idle_ns=total - busy,
                peak_mem_bytes=self.peak[rank],
            )
            if self.record_timeline:
                timeline.extend((rank, s, name, a, b) for _, s, name, a, b in ivs)
        return SimReport(
            total_ns=total,
            per_rank=per_rank,
            oom=self.first_oom is not None,
            first_oom=self.first_oom,
            dispatched_ops=self.dispatched,
            completed_ops=self.completed,
            timeline=timeline,
        )


def _merge(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for a, b in sorted(intervals):
        if b <= a:
            continue
        if out and a <= out[-1][1]:
            if b > out[-1][1]:
                out[-1] = (out[-1][0], b)
        else:
            out.append((a, b))
    return out


def _union_len(intervals: list[tuple[int, int]]) -> int:
    return sum(b - a for a, b in _merge(intervals))


def _subtract_len(base: list[tuple[int, int]], cut: list[tuple[int, int]]) -> int:
    """Length of base minus cut; both inputs already merged and sorted."""
    total = 0
    ci = 0
    for a, b in base:
        pos = a
        while ci < len(cut) and cut[ci][1] <= pos:
            ci += 1
        k = ci
        while pos < b:
            if k >= len(cut) or cut[k][0] >= b:
                total += b - pos
                break
            ca, cb = cut[k]
            if ca > pos:
                total += ca - pos
            pos = max(pos, cb)
            k += 1
    return total


def simulate(annotated: AnnotatedJob, cluster: ClusterSpec | None = None,
             record_timeline: bool = False) -> SimReport:
    """Run the annotated job to completion and return the SimReport.

    Deterministic: identical inputs produce identical reports.
    """
    cluster = cluster if cluster is not None else annotated.job.cluster
    if cluster.num_devices != annotated.job.cluster.num_devices:
        raise ValueError("cluster does not match the collated job")
    return _Sim(annotated, cluster, record_timeline).run()


def compute_mfu(report: SimReport, model_flops: int, cluster: ClusterSpec,
                dtype: str) -> float | None:
    """Model-flops utilization; None marks an OOM report as infeasible."""
    if report.oom:
        return None
    if report.total_ns <= 0:
        return 0.0
    peak = cluster.device.peak_flops[dtype]
    achieved_per_s = model_flops * 1_000_000_000 / report.total_ns
    return achieved_per_s / (cluster.num_devices * peak)

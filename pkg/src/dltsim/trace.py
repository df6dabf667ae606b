"""Device-API trace schema: the contract between trace producers and the pipeline.

A worker trace is the ordered sequence of device-API interactions of one rank
during one training iteration.  Every frontend (the bundled synthetic one or an
external tool) must emit this schema; the collator, estimator and simulator
consume it.

Wire format (one file per worker, ``rank_<r>.trace``, UTF-8 text):

    dltsim-trace v1 rank=<r> host=<h> device=<d>
    <seq> <KIND> <key>=<value> ...

``seq`` is the 0-based position of the event; the sequence is contiguous.
Keys appear in a fixed order per kind (see ``_FIELD_ORDER``); kernel attribute
dimensions are emitted as ``a.<name>=<int>`` in sorted name order after the
fixed keys.  All times are integer nanoseconds; all sizes are integer bytes.

Handle conventions:

* stream / event / alloc handles are worker-local small integers; stream 0
  always exists and streams are created implicitly on first use.
* (event_id, version) pairs track reuse of one event handle: the n-th record
  of an id carries version n, counting from 0.
* comm_id is a globally unique token ``[A-Za-z0-9._-]+``; the producer must
  guarantee global uniqueness (the bundled frontend derives ids from group
  coordinates).

Host-gap convention: a HostGap delays the *next* event in the trace.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from typing import IO, Mapping, Union

SCHEMA_VERSION = "v1"

DTYPE_SIZES = {"fp32": 4, "fp16": 2, "bf16": 2}

COLLECTIVE_KINDS = ("AllReduce", "AllGather", "ReduceScatter", "Broadcast", "SendRecv")
MEMCPY_DIRECTIONS = ("H2D", "D2H", "D2D")

_COMM_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")
_ATTR_NAME_RE = re.compile(r"^[a-z0-9_]+$")


@dataclass(frozen=True, slots=True)
class KernelAttrs:
    """Estimation-relevant metadata of one kernel launch.

    ``dims`` is an open map of named integer dimensions (m/n/k for gemms,
    elems for elementwise kernels); ``flops``/``bytes_moved`` are the
    producer's work estimates that estimators may consume directly.
    """

    dims: tuple[tuple[str, int], ...]
    dtype: str
    flops: int
    bytes_moved: int

    @staticmethod
    def make(dims: Mapping[str, int], dtype: str, flops: int, bytes_moved: int) -> "KernelAttrs":
        return KernelAttrs(tuple(sorted(dims.items())), dtype, flops, bytes_moved)

    def dim(self, name: str) -> int:
        return dict(self.dims)[name]


@dataclass(frozen=True, slots=True)
class HostGap:
    duration_ns: int


@dataclass(frozen=True, slots=True)
class KernelLaunch:
    stream: int
    op_kind: str
    attrs: KernelAttrs


@dataclass(frozen=True, slots=True)
class MemAlloc:
    alloc_id: int
    bytes: int


@dataclass(frozen=True, slots=True)
class MemFree:
    alloc_id: int


@dataclass(frozen=True, slots=True)
class Memcpy:
    stream: int
    direction: str
    bytes: int


@dataclass(frozen=True, slots=True)
class Memset:
    stream: int
    bytes: int


@dataclass(frozen=True, slots=True)
class EventRecord:
    stream: int
    event_id: int
    version: int


@dataclass(frozen=True, slots=True)
class StreamWaitEvent:
    stream: int
    event_id: int
    version: int


@dataclass(frozen=True, slots=True)
class EventSynchronize:
    event_id: int
    version: int


@dataclass(frozen=True, slots=True)
class StreamSynchronize:
    stream: int


@dataclass(frozen=True, slots=True)
class DeviceSynchronize:
    pass


@dataclass(frozen=True, slots=True)
class CommInit:
    comm_id: str
    nranks: int
    my_rank: int


@dataclass(frozen=True, slots=True)
class Collective:
    stream: int
    comm_id: str
    call_idx: int
    kind: str
    bytes: int
    nranks: int


TraceEvent = Union[
    HostGap, KernelLaunch, MemAlloc, MemFree, Memcpy, Memset,
    EventRecord, StreamWaitEvent, EventSynchronize, StreamSynchronize,
    DeviceSynchronize, CommInit, Collective,
]

EVENT_KINDS = {
    HostGap: "HostGap",
    KernelLaunch: "KernelLaunch",
    MemAlloc: "MemAlloc",
    MemFree: "MemFree",
    Memcpy: "Memcpy",
    Memset: "Memset",
    EventRecord: "EventRecord",
    StreamWaitEvent: "StreamWaitEvent",
    EventSynchronize: "EventSynchronize",
    StreamSynchronize: "StreamSynchronize",
    DeviceSynchronize: "DeviceSynchronize",
    CommInit: "CommInit",
    Collective: "Collective",
}
KIND_CLASSES = {name: cls for cls, name in EVENT_KINDS.items()}


@dataclass(frozen=True)
class WorkerTrace:
    """Ordered event sequence of one rank; the event list index is the seq."""

    global_rank: int
    host_index: int
    device_index: int
    events: tuple[TraceEvent, ...] = field(default_factory=tuple)

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for ev in self.events:
            name = EVENT_KINDS[type(ev)]
            counts[name] = counts.get(name, 0) + 1
        return counts

    def total_flops(self) -> int:
        return sum(ev.attrs.flops for ev in self.events if isinstance(ev, KernelLaunch))


@dataclass(frozen=True)
class Violation:
    """One schema-invariant violation; ``seq`` is the offending event index."""

    seq: int
    rule: str
    message: str

    def __str__(self) -> str:
        return f"seq {self.seq}: [{self.rule}] {self.message}"


class TraceError(Exception):
    """Base class for trace parsing/validation failures."""


class TraceParseError(TraceError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TraceValidationError(TraceError):
    def __init__(self, violations: list[Violation]):
        head = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(f"invalid trace: {head}{more}")
        self.violations = violations


# --- serialization -----------------------------------------------------------

# Fixed key order per kind; attr dims follow as "a.<name>" in sorted order.
_FIELD_ORDER = {
    "HostGap": ("dur",),
    "KernelLaunch": ("stream", "op", "dtype", "flops", "bytes"),
    "MemAlloc": ("id", "bytes"),
    "MemFree": ("id",),
    "Memcpy": ("stream", "dir", "bytes"),
    "Memset": ("stream", "bytes"),
    "EventRecord": ("stream", "event", "ver"),
    "StreamWaitEvent": ("stream", "event", "ver"),
    "EventSynchronize": ("event", "ver"),
    "StreamSynchronize": ("stream",),
    "DeviceSynchronize": (),
    "CommInit": ("comm", "nranks", "rank"),
    "Collective": ("stream", "comm", "idx", "kind", "bytes", "nranks"),
}


def _event_kv(ev: TraceEvent) -> list[tuple[str, str]]:
    if isinstance(ev, HostGap):
        return [("dur", str(ev.duration_ns))]
    if isinstance(ev, KernelLaunch):
        kv = [("stream", str(ev.stream)), ("op", ev.op_kind), ("dtype", ev.attrs.dtype),
              ("flops", str(ev.attrs.flops)), ("bytes", str(ev.attrs.bytes_moved))]
        kv.extend((f"a.{k}", str(v)) for k, v in ev.attrs.dims)
        return kv
    if isinstance(ev, MemAlloc):
        return [("id", str(ev.alloc_id)), ("bytes", str(ev.bytes))]
    if isinstance(ev, MemFree):
        return [("id", str(ev.alloc_id))]
    if isinstance(ev, Memcpy):
        return [("stream", str(ev.stream)), ("dir", ev.direction), ("bytes", str(ev.bytes))]
    if isinstance(ev, Memset):
        return [("stream", str(ev.stream)), ("bytes", str(ev.bytes))]
    if isinstance(ev, EventRecord):
        return [("stream", str(ev.stream)), ("event", str(ev.event_id)), ("ver", str(ev.version))]
    if isinstance(ev, StreamWaitEvent):
        return [("stream", str(ev.stream)), ("event", str(ev.event_id)), ("ver", str(ev.version))]
    if isinstance(ev, EventSynchronize):
        return [("event", str(ev.event_id)), ("ver", str(ev.version))]
    if isinstance(ev, StreamSynchronize):
        return [("stream", str(ev.stream))]
    if isinstance(ev, DeviceSynchronize):
        return []
    if isinstance(ev, CommInit):
        return [("comm", ev.comm_id), ("nranks", str(ev.nranks)), ("rank", str(ev.my_rank))]
    if isinstance(ev, Collective):
        return [("stream", str(ev.stream)), ("comm", ev.comm_id), ("idx", str(ev.call_idx)),
                ("kind", ev.kind), ("bytes", str(ev.bytes)), ("nranks", str(ev.nranks))]
    raise TypeError(f"unknown event type {type(ev)!r}")


def serialize_trace(trace: WorkerTrace, sink: IO[str]) -> None:
    """Write ``trace`` to ``sink`` in the line-delimited text format."""
    sink.write(f"dltsim-trace {SCHEMA_VERSION} rank={trace.global_rank} "
               f"host={trace.host_index} device={trace.device_index}\n")
    for seq, ev in enumerate(trace.events):
        kind = EVENT_KINDS[type(ev)]
        kv = _event_kv(ev)
        parts = [str(seq), kind] + [f"{k}={v}" for k, v in kv]
        sink.write(" ".join(parts) + "\n")


def dumps_trace(trace: WorkerTrace) -> str:
    buf = io.StringIO()
    serialize_trace(trace, buf)
    return buf.getvalue()


def _parse_int(raw: str, line_no: int, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise TraceParseError(line_no, f"non-integer value for {key}: {raw!r}") from None


def _parse_event(kind: str, kv: list[tuple[str, str]], line_no: int) -> TraceEvent:
    if kind not in _FIELD_ORDER:
        raise TraceParseError(line_no, f"unknown event kind {kind!r}")
    expected = _FIELD_ORDER[kind]
    got_fixed = tuple(k for k, _ in kv[:len(expected)])
    if got_fixed != expected:
        raise TraceParseError(line_no, f"{kind} expects keys {expected}, got {got_fixed}")
    vals = {k: v for k, v in kv[:len(expected)]}
    extra = kv[len(expected):]
    if kind != "KernelLaunch" and extra:
        raise TraceParseError(line_no, f"{kind} takes no extra keys, got {extra[0][0]!r}")

    def i(key: str) -> int:
        return _parse_int(vals[key], line_no, key)

    if kind == "HostGap":
        return HostGap(i("dur"))
    if kind == "KernelLaunch":
        dims = []
        for k, v in extra:
            if not k.startswith("a."):
                raise TraceParseError(line_no, f"kernel attr keys must start with 'a.', got {k!r}")
            name = k[2:]
            if not _ATTR_NAME_RE.match(name):
                raise TraceParseError(line_no, f"bad attr name {name!r}")
            dims.append((name, _parse_int(v, line_no, k)))
        if dims != sorted(dims):
            raise TraceParseError(line_no, "kernel attrs must be sorted by name")
        return KernelLaunch(i("stream"), vals["op"],
                            KernelAttrs(tuple(dims), vals["dtype"], i("flops"), i("bytes")))
    if kind == "MemAlloc":
        return MemAlloc(i("id"), i("bytes"))
    if kind == "MemFree":
        return MemFree(i("id"))
    if kind == "Memcpy":
        return Memcpy(i("stream"), vals["dir"], i("bytes"))
    if kind == "Memset":
        return Memset(i("stream"), i("bytes"))
    if kind == "EventRecord":
        return EventRecord(i("stream"), i("event"), i("ver"))
    if kind == "StreamWaitEvent":
        return StreamWaitEvent(i("stream"), i("event"), i("ver"))
    if kind == "EventSynchronize":
        return EventSynchronize(i("event"), i("ver"))
    if kind == "StreamSynchronize":
        return StreamSynchronize(i("stream"))
    if kind == "DeviceSynchronize":
        return DeviceSynchronize()
    if kind == "CommInit":
        return CommInit(vals["comm"], i("nranks"), i("rank"))
    if kind == "Collective":
        return Collective(i("stream"), vals["comm"], i("idx"), vals["kind"],
                          i("bytes"), i("nranks"))
    raise TraceParseError(line_no, f"unhandled kind {kind}")


def parse_trace(source: IO[str]) -> WorkerTrace:
    """Parse and validate one worker trace; raises on malformed or invalid input."""
    header = source.readline()
    if not header:
        raise TraceParseError(1, "empty input, missing header")
    m = re.match(r"^dltsim-trace (\S+) rank=(\d+) host=(\d+) device=(\d+)\s*$", header)
    if not m:
        raise TraceParseError(1, f"bad header: {header.strip()!r}")
    if m.group(1) != SCHEMA_VERSION:
        raise TraceParseError(1, f"unsupported schema version {m.group(1)!r}")
    rank, host, device = int(m.group(2)), int(m.group(3)), int(m.group(4))

    events: list[TraceEvent] = []
    for line_no, line in enumerate(source, start=2):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) < 2:
            raise TraceParseError(line_no, f"malformed line: {line!r}")
        seq = _parse_int(parts[0], line_no, "seq")
        if seq != len(events):
            raise TraceParseError(line_no, f"non-monotone seq: expected {len(events)}, got {seq}")
        kv = []
        for tok in parts[2:]:
            if "=" not in tok:
                raise TraceParseError(line_no, f"malformed key=value token {tok!r}")
            k, _, v = tok.partition("=")
            kv.append((k, v))
        events.append(_parse_event(parts[1], kv, line_no))

    trace = WorkerTrace(rank, host, device, tuple(events))
    violations = validate_trace(trace)
    if violations:
        raise TraceValidationError(violations)
    return trace


def loads_trace(text: str) -> WorkerTrace:
    return parse_trace(io.StringIO(text))


# --- validation --------------------------------------------------------------

def validate_trace(trace: WorkerTrace) -> list[Violation]:
    """Check every schema invariant; returns one Violation per broken rule."""
    out: list[Violation] = []
    recorded: set[tuple[int, int]] = set()        # (event_id, version)
    next_version: dict[int, int] = {}             # event_id -> expected next version
    comms: dict[str, CommInit] = {}
    next_call_idx: dict[str, int] = {}
    live_allocs: set[int] = set()
    seen_allocs: set[int] = set()

    def bad(seq: int, rule: str, msg: str) -> None:
        out.append(Violation(seq, rule, msg))

    for seq, ev in enumerate(trace.events):
        stream = getattr(ev, "stream", 0)
        if stream < 0:
            bad(seq, "bad-stream", f"negative stream handle {stream}")
        if isinstance(ev, HostGap):
            if ev.duration_ns < 0:
                bad(seq, "negative-duration", f"host gap of {ev.duration_ns}ns")
        elif isinstance(ev, KernelLaunch):
            if ev.attrs.flops < 0:
                bad(seq, "negative-flops", f"flop_count {ev.attrs.flops}")
            if ev.attrs.bytes_moved < 0:
                bad(seq, "negative-bytes", f"bytes_moved {ev.attrs.bytes_moved}")
            if ev.attrs.dtype not in DTYPE_SIZES:
                bad(seq, "unknown-dtype", f"dtype {ev.attrs.dtype!r}")
        elif isinstance(ev, MemAlloc):
            if ev.bytes <= 0:
                bad(seq, "nonpositive-bytes", f"alloc of {ev.bytes} bytes")
            if ev.alloc_id in live_allocs:
                bad(seq, "duplicate-alloc", f"alloc_id {ev.alloc_id} already live")
            live_allocs.add(ev.alloc_id)
            seen_allocs.add(ev.alloc_id)
        elif isinstance(ev, MemFree):
            if ev.alloc_id not in live_allocs:
                if ev.alloc_id in seen_allocs:
                    bad(seq, "double-free", f"alloc_id {ev.alloc_id} already freed")
                else:
                    bad(seq, "free-unallocated", f"free of unallocated handle {ev.alloc_id}")
            else:
                live_allocs.discard(ev.alloc_id)
        elif isinstance(ev, (Memcpy, Memset)):
            if ev.bytes <= 0:
                bad(seq, "nonpositive-bytes", f"{EVENT_KINDS[type(ev)]} of {ev.bytes} bytes")
            if isinstance(ev, Memcpy) and ev.direction not in MEMCPY_DIRECTIONS:
                bad(seq, "bad-direction", f"direction {ev.direction!r}")
        elif isinstance(ev, EventRecord):
            want = next_version.get(ev.event_id, 0)
            if ev.version != want:
                bad(seq, "event-version-order",
                    f"event {ev.event_id} recorded version {ev.version}, expected {want}")
            next_version[ev.event_id] = max(want, ev.version) + 1
            recorded.add((ev.event_id, ev.version))
        elif isinstance(ev, (StreamWaitEvent, EventSynchronize)):
            key = (ev.event_id, ev.version)
            if key not in recorded:
                kind = EVENT_KINDS[type(ev)]
                bad(seq, "unrecorded-event",
                    f"{kind} on unrecorded event ({ev.event_id}, v{ev.version})")
        elif isinstance(ev, CommInit):
            if ev.nranks < 1:
                bad(seq, "bad-nranks", f"nranks {ev.nranks}")
            if not (0 <= ev.my_rank < max(ev.nranks, 1)):
                bad(seq, "my-rank-range", f"my_rank {ev.my_rank} not in [0, {ev.nranks})")
            if not _COMM_ID_RE.match(ev.comm_id):
                bad(seq, "bad-comm-id", f"comm_id {ev.comm_id!r}")
            if ev.comm_id in comms:
                bad(seq, "duplicate-comm-init", f"comm {ev.comm_id} already initialized")
            else:
                comms[ev.comm_id] = ev
                next_call_idx[ev.comm_id] = 0
        elif isinstance(ev, Collective):
            if ev.comm_id not in comms:
                bad(seq, "unknown-comm",
                    f"collective on uninitialized comm {ev.comm_id}")
                continue
            if ev.kind not in COLLECTIVE_KINDS:
                bad(seq, "bad-collective-kind", f"kind {ev.kind!r}")
            if ev.bytes <= 0:
                bad(seq, "nonpositive-bytes", f"collective of {ev.bytes} bytes")
            want = next_call_idx[ev.comm_id]
            if ev.call_idx != want:
                bad(seq, "call-idx-order",
                    f"comm {ev.comm_id} call_idx {ev.call_idx}, expected {want}")
            next_call_idx[ev.comm_id] = want + 1
            if ev.nranks != comms[ev.comm_id].nranks:
                bad(seq, "nranks-mismatch",
                    f"collective nranks {ev.nranks} != communicator {comms[ev.comm_id].nranks}")
    return out


def assert_valid(trace: WorkerTrace) -> WorkerTrace:
    violations = validate_trace(trace)
    if violations:
        raise TraceValidationError(violations)
    return trace

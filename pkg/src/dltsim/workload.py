"""Synthetic workload frontend: deterministic traces for 3D-parallel
transformer training.

For a given model, training configuration and cluster, this module emits one
steady-state training iteration per worker in the shared trace schema:
per-microbatch forward/backward kernels with exact gemm dimensions, tensor-
parallel collectives, pipeline send/recv at stage boundaries, the data-
parallel gradient reduction on a dedicated communication stream, optimizer
step kernels, and allocation events reflecting parameter / gradient /
optimizer / activation lifetimes.

Work accounting (single source of truth for kernels and the analytical
cross-checks):

* gemm: flops = 2*m*n*k; bytes = esz*(inputs + output).
* elementwise (layernorm/gelu/add/softmax/cross_entropy): flops = c*elems
  with small documented constants; backward emits one kernel at 2x forward
  flops, and each forward gemm yields two backward gemms (dgrad + wgrad) of
  equal flops, so backward work is exactly twice forward work.
* attention scores/softmax work shards by the tensor-parallel degree, which
  requires seq_len % tp == 0 (as hidden % tp for the projections).
* without sequence parallelism the layernorm/residual work is replicated
  across TP ranks; with it, those kernels and the activation stash shard by
  tp, and each AllReduce is replaced by a ReduceScatter/AllGather pair.
* activation recomputation re-emits the forward compute kernels before each
  backward; collective outputs are treated as cached, so recomputation never
  adds communication and strictly reduces the stash.
* parameter counts track weight matrices only (biases and norm parameters
  are omitted from the memory model).
* the gradient bucket is reduced once at the end of backward on the
  dedicated comm stream: AllReduce(S) without the distributed optimizer, or
  ReduceScatter(S) before and AllGather(S) after the optimizer step with it,
  which moves the same total bytes under the ring cost model.

Host gaps model per-launch dispatch overhead: one constant gap precedes each
kernel-class launch (kernels, memcpys, memsets); collective dispatch cost is
considered part of the link alpha.  A gap always precedes the event it
delays.

Streams: 0 is compute, 1 is the gradient-comm stream, and each pipeline
boundary role (recv-forward, send-forward, recv-backward, send-backward)
gets its own stream so that rendezvous ordering can never self-deadlock.
Cross-stream data flow is expressed with EventRecord/StreamWaitEvent pairs;
event handles are reused across microbatches, so versions count up per
handle.

Communicator ids encode group coordinates and are therefore globally unique:
``tp.p<stage>.d<dp>``, ``dp.t<tp>.p<stage>``, and ``pf<b>/pb<b>.t<tp>.d<dp>``
for the forward/backward direction of virtual-stage boundary ``b``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import yaml

from .cluster import ClusterSpec
from .collate import DupEntry, ExpansionMap
from .estimate import ProfileRow, ProfileTable, kernel_view
from .trace import (
    Collective, CommInit, DTYPE_SIZES, DeviceSynchronize, EventRecord,
    HostGap, KernelAttrs, KernelLaunch, MemAlloc, MemFree, Memcpy, Memset,
    StreamWaitEvent, WorkerTrace,
)

DEFAULT_DISPATCH_OVERHEAD_NS = 5000

STREAM_COMPUTE = 0
STREAM_GRAD_COMM = 1
_FIRST_P2P_STREAM = 2

FWD = "F"
BWD = "B"


class ConfigError(Exception):
    pass


class ScheduleKind(enum.Enum):
    GPIPE = "gpipe"
    ONE_F_ONE_B = "1f1b"
    INTERLEAVED_ONE_F_ONE_B = "interleaved"

    @staticmethod
    def from_name(name: str) -> "ScheduleKind":
        for kind in ScheduleKind:
            if kind.value == name:
                return kind
        raise ConfigError(f"unknown schedule {name!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Transformer shape; presets for published model sizes ship as yaml."""

    name: str
    num_layers: int
    hidden_size: int
    seq_len: int
    vocab_size: int
    dtype: str = "bf16"

    def __post_init__(self):
        if min(self.num_layers, self.hidden_size, self.seq_len, self.vocab_size) < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.dtype not in DTYPE_SIZES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")

    @property
    def elem_size(self) -> int:
        return DTYPE_SIZES[self.dtype]

    def flops_per_layer_fwd(self, batch: int) -> int:
        return sum(k.flops for k in _layer_fwd_kernels(self, batch, 1, False))

    def bytes_per_layer(self, batch: int) -> int:
        return sum(k.bytes for k in _layer_fwd_kernels(self, batch, 1, False))

    def iteration_flops(self, global_batch: int) -> int:
        """Mathematical flops of one iteration (fwd + 2x bwd), excluding
        recomputation, TP replication and the optimizer: the MFU numerator."""
        fwd = self.num_layers * self.flops_per_layer_fwd(global_batch)
        fwd += sum(k.flops for k in _head_fwd_kernels(self, global_batch, 1, False))
        return 3 * fwd


@dataclass(frozen=True)
class ConfigPoint:
    """One training recipe in the search lattice."""

    tp: int
    pp: int
    micro_mult: int
    virtual_stages: int
    act_recompute: bool
    seq_parallel: bool
    dist_optimizer: bool
    global_batch: int

    @property
    def microbatches(self) -> int:
        # Gradient accumulation scales with pipeline depth.
        return self.micro_mult * self.pp

    def dp(self, cluster: ClusterSpec) -> int:
        return cluster.num_devices // (self.tp * self.pp)

    def microbatch_size(self, cluster: ClusterSpec) -> int:
        return self.global_batch // (self.dp(cluster) * self.microbatches)

    def key(self) -> tuple:
        return (self.tp, self.pp, self.micro_mult, self.virtual_stages,
                self.act_recompute, self.seq_parallel, self.dist_optimizer,
                self.global_batch)

    def label(self) -> str:
        flags = "".join(c if on else "-" for c, on in
                        (("r", self.act_recompute), ("s", self.seq_parallel),
                         ("z", self.dist_optimizer)))
        return (f"tp{self.tp}.pp{self.pp}.mm{self.micro_mult}"
                f".vs{self.virtual_stages}.{flags}")


def validate_config(model: ModelSpec | None, config: ConfigPoint, cluster: ClusterSpec,
                    schedule: ScheduleKind | None = None) -> list[str]:
    """All divisibility/feasibility rules; returns one message per violation.

    Pass model=None for the shape-free subset (cluster divisibility only).
    """
    errors = []
    if min(config.tp, config.pp, config.micro_mult, config.virtual_stages,
           config.global_batch) < 1:
        errors.append("tp/pp/micro_mult/virtual_stages/global_batch must be >= 1")
        return errors
    n = cluster.num_devices
    if n % (config.tp * config.pp) != 0:
        errors.append(f"tp*pp = {config.tp * config.pp} does not divide "
                      f"device count {n}")
        return errors
    d = config.dp(cluster)
    m = config.microbatches
    if config.global_batch % (d * m) != 0:
        errors.append(f"global_batch {config.global_batch} not divisible by "
                      f"dp*microbatches = {d}*{m}")
    if model is not None:
        if model.hidden_size % config.tp != 0:
            errors.append(f"hidden_size {model.hidden_size} not divisible by tp {config.tp}")
        if model.seq_len % config.tp != 0:
            errors.append(f"seq_len {model.seq_len} not divisible by tp {config.tp}")
        if model.vocab_size % config.tp != 0:
            errors.append(f"vocab_size {model.vocab_size} not divisible by tp {config.tp}")
        if model.num_layers % (config.pp * config.virtual_stages) != 0:
            errors.append(f"num_layers {model.num_layers} not divisible by "
                          f"pp*virtual_stages = {config.pp}*{config.virtual_stages}")
    if config.virtual_stages > 1 and config.pp == 1:
        errors.append("virtual_stages > 1 requires pp > 1 (interleaving needs a pipeline)")
    if schedule is not None:
        if schedule is ScheduleKind.INTERLEAVED_ONE_F_ONE_B and config.virtual_stages == 1:
            errors.append("interleaved schedule requires virtual_stages > 1")
        if schedule is not ScheduleKind.INTERLEAVED_ONE_F_ONE_B and config.virtual_stages > 1:
            errors.append(f"schedule {schedule.value} requires virtual_stages == 1")
        if schedule is ScheduleKind.ONE_F_ONE_B and config.microbatches < config.pp:
            errors.append("1f1b needs microbatches >= pp for warmup")
    return errors


def require_valid(model: ModelSpec | None, config: ConfigPoint, cluster: ClusterSpec,
                  schedule: ScheduleKind | None = None) -> None:
    errors = validate_config(model, config, cluster, schedule)
    if errors:
        raise ConfigError("; ".join(errors))


def default_schedule(config: ConfigPoint) -> ScheduleKind:
    if config.virtual_stages > 1:
        return ScheduleKind.INTERLEAVED_ONE_F_ONE_B
    return ScheduleKind.ONE_F_ONE_B


# --- rank coordinates and communicator ids ------------------------------------

def rank_coords(rank: int, config: ConfigPoint, cluster: ClusterSpec) -> tuple[int, int, int]:
    """rank -> (tp index, dp index, stage); tp varies fastest, stage slowest."""
    t, d = config.tp, config.dp(cluster)
    return rank % t, (rank // t) % d, rank // (t * d)


def rank_of(tp_i: int, dp_j: int, stage: int, config: ConfigPoint,
            cluster: ClusterSpec) -> int:
    t, d = config.tp, config.dp(cluster)
    return stage * t * d + dp_j * t + tp_i


def _tp_comm(stage: int, dp_j: int) -> str:
    return f"tp.p{stage}.d{dp_j}"


def _dp_comm(tp_i: int, stage: int) -> str:
    return f"dp.t{tp_i}.p{stage}"


def _pf_comm(boundary: int, tp_i: int, dp_j: int) -> str:
    return f"pf{boundary}.t{tp_i}.d{dp_j}"


def _pb_comm(boundary: int, tp_i: int, dp_j: int) -> str:
    return f"pb{boundary}.t{tp_i}.d{dp_j}"


def worker_comms(config: ConfigPoint, cluster: ClusterSpec,
                 rank: int) -> list[tuple[str, int, int]]:
    """Ordered (comm_id, nranks, my_rank) list of one rank's communicators.

    The order is identical for all ranks of one duplicate class, which is
    what lets expansion maps be built by positional alignment.
    """
    t, d = config.tp, config.dp(cluster)
    i, j, k = rank_coords(rank, config, cluster)
    p, v = config.pp, config.virtual_stages
    out: list[tuple[str, int, int]] = []
    if t > 1:
        out.append((_tp_comm(k, j), t, i))
    if d > 1:
        out.append((_dp_comm(i, k), d, j))
    total_vs = p * v
    for c in range(v):
        vs = k + c * p
        if vs > 0:
            out.append((_pf_comm(vs - 1, i, j), 2, 1))   # recv activations
            out.append((_pb_comm(vs - 1, i, j), 2, 0))   # send gradients
        if vs < total_vs - 1:
            out.append((_pf_comm(vs, i, j), 2, 0))       # send activations
            out.append((_pb_comm(vs, i, j), 2, 1))       # recv gradients
    return out


def unique_workers(config: ConfigPoint, cluster: ClusterSpec
                   ) -> tuple[list[int], ExpansionMap]:
    """Minimal rank set to generate (one per pipeline stage) plus the map
    reconstructing every omitted rank from its stage representative."""
    require_valid(None, config, cluster)
    reps = [rank_of(0, 0, k, config, cluster) for k in range(config.pp)]
    rep_comm_lists = {k: worker_comms(config, cluster, reps[k]) for k in range(config.pp)}
    expansion: ExpansionMap = {}
    for rank in range(cluster.num_devices):
        _, _, k = rank_coords(rank, config, cluster)
        rep = reps[k]
        if rank == rep:
            continue
        own = worker_comms(config, cluster, rank)
        rep_list = rep_comm_lists[k]
        comm_map = {rc[0]: (oc[0], oc[2]) for rc, oc in zip(rep_list, own)}
        expansion[rank] = DupEntry(rep, comm_map)
    return reps, expansion


def selective_launch(config: ConfigPoint, cluster: ClusterSpec) -> list[int]:
    """Ahead-of-time deduplication: the only ranks worth generating at all."""
    return unique_workers(config, cluster)[0]


# --- kernel inventory ----------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    op_kind: str
    dims: Mapping[str, int]
    flops: int
    bytes: int


def _gemm(m: int, n: int, k: int, esz: int) -> KernelSpec:
    return KernelSpec("gemm", {"m": m, "n": n, "k": k},
                      2 * m * n * k, esz * (m * k + k * n + m * n))


def _elem(op_kind: str, elems: int, flops_per: int, esz: int,
          rw_factor: int = 2) -> KernelSpec:
    return KernelSpec(op_kind, {"elems": elems}, flops_per * elems,
                      rw_factor * elems * esz)


def _layer_fwd_kernels(model: ModelSpec, b: int, tp: int, sp: bool) -> list[KernelSpec]:
    s, h, esz = model.seq_len, model.hidden_size, model.elem_size
    u = tp if sp else 1
    ks = [
        _elem("layernorm", b * s * h // u, 8, esz),
        _gemm(b * s, 3 * h // tp, h, esz),                       # qkv projection
        KernelSpec("gemm", {"m": b * s, "n": s, "k": h // tp},   # attention scores
                   2 * b * s * s * h // tp,
                   esz * (2 * b * s * h // tp + b * s * s // tp)),
        _elem("softmax", b * s * s // tp, 5, esz),
        KernelSpec("gemm", {"m": b * s, "n": h // tp, "k": s},   # attention context
                   2 * b * s * s * h // tp,
                   esz * (b * s * s // tp + 2 * b * s * h // tp)),
        _gemm(b * s, h, h // tp, esz),                           # output projection
        _elem("add", b * s * h // u, 1, esz, rw_factor=3),
        _elem("layernorm", b * s * h // u, 8, esz),
        _gemm(b * s, 4 * h // tp, h, esz),                       # mlp up
        _elem("gelu", 4 * b * s * h // tp, 8, esz),
        _gemm(b * s, h, 4 * h // tp, esz),                       # mlp down
        _elem("add", b * s * h // u, 1, esz, rw_factor=3),
    ]
    return ks


def _embed_fwd_kernels(model: ModelSpec, b: int, tp: int, sp: bool) -> list[KernelSpec]:
    s, h, esz = model.seq_len, model.hidden_size, model.elem_size
    u = tp if sp else 1
    return [KernelSpec("embed", {"tokens": b * s}, 0, b * s * h * esz // u + b * s * 8)]


def _head_fwd_kernels(model: ModelSpec, b: int, tp: int, sp: bool) -> list[KernelSpec]:
    s, h, v, esz = model.seq_len, model.hidden_size, model.vocab_size, model.elem_size
    u = tp if sp else 1
    return [
        _elem("layernorm", b * s * h // u, 8, esz),
        _gemm(b * s, v // tp, h, esz),                           # lm head
        _elem("cross_entropy", b * s * v // tp, 5, esz),
    ]


def _bwd_of(fwd: Sequence[KernelSpec]) -> list[KernelSpec]:
    """Backward inventory: two equal-flop gemms per forward gemm, one
    double-flop kernel per elementwise forward kernel, reverse order."""
    out: list[KernelSpec] = []
    for k in reversed(fwd):
        if k.op_kind == "gemm":
            out.append(k)
            out.append(k)
        else:
            out.append(KernelSpec(k.op_kind, k.dims, 2 * k.flops,
                                  k.bytes + k.bytes // 2))
    return out


def _layer_stash_elems(model: ModelSpec, b: int, tp: int, sp: bool,
                       recompute: bool) -> int:
    s, h = model.seq_len, model.hidden_size
    u = tp if sp else 1
    if recompute:
        return b * s * h // u
    return 12 * b * s * h // tp + 2 * b * s * s // tp + 5 * b * s * h // u


@dataclass(frozen=True)
class _ChunkShape:
    """Layers and specials of one virtual-stage chunk on a device."""

    vs: int
    layers: int
    has_embed: bool
    has_head: bool


def _device_chunks(model: ModelSpec, config: ConfigPoint, stage: int) -> list[_ChunkShape]:
    p, v = config.pp, config.virtual_stages
    total_vs = p * v
    layers_per_chunk = model.num_layers // total_vs
    chunks = []
    for c in range(v):
        vs = stage + c * p
        chunks.append(_ChunkShape(vs, layers_per_chunk, vs == 0, vs == total_vs - 1))
    return chunks


def _chunk_stash_bytes(model: ModelSpec, config: ConfigPoint, b: int,
                       chunk: _ChunkShape) -> int:
    tp, sp, rc = config.tp, config.seq_parallel, config.act_recompute
    esz = model.elem_size
    u = tp if sp else 1
    elems = chunk.layers * _layer_stash_elems(model, b, tp, sp, rc)
    if chunk.has_head and not rc:
        elems += (model.seq_len * b * model.vocab_size // tp
                  + b * model.seq_len * model.hidden_size // u)
    return elems * esz


def device_param_elems(model: ModelSpec, config: ConfigPoint, stage: int) -> int:
    """Weight elements resident on one device of this stage (matrices only)."""
    h, v = model.hidden_size, model.vocab_size
    per_layer = 12 * h * h // config.tp
    total = 0
    for chunk in _device_chunks(model, config, stage):
        total += chunk.layers * per_layer
        if chunk.has_embed:
            total += v * h // config.tp
        if chunk.has_head:
            total += v * h // config.tp
    return total


def device_memory_bytes(model: ModelSpec, config: ConfigPoint,
                        cluster: ClusterSpec, stage: int) -> dict[str, int]:
    """Static byte footprint per category on one device of this stage."""
    p = device_param_elems(model, config, stage)
    d = config.dp(cluster)
    opt = 12 * p
    if config.dist_optimizer:
        opt = -(-opt // d)
    return {"params": p * model.elem_size, "grads": p * 4, "optimizer": opt}


# --- pipeline schedules ---------------------------------------------------------

def pipeline_order(schedule: ScheduleKind, p: int, m: int, v: int,
                   stage: int) -> list[tuple[str, int, int]]:
    """Per-stage op order as (phase, microbatch, chunk) triples.

    GPipe: all forwards then all backwards.  1F1B: warmup of min(p-1-stage, m)
    forwards, steady one-forward-one-backward, backward cooldown.  The
    interleaved variant walks microbatches in groups of p per chunk with a
    deepened warmup of 2*(p-stage-1) + (v-1)*p virtual microbatches; it
    requires m % p == 0.
    """
    if schedule is ScheduleKind.GPIPE:
        if v != 1:
            raise ConfigError("gpipe schedule runs with virtual_stages == 1")
        return [(FWD, j, 0) for j in range(m)] + [(BWD, j, 0) for j in range(m)]

    if schedule is ScheduleKind.ONE_F_ONE_B:
        if v != 1:
            raise ConfigError("1f1b schedule runs with virtual_stages == 1")
        if m < p:
            raise ConfigError(f"1f1b with {m} microbatches on {p} stages has no steady state")
        warmup = min(p - 1 - stage, m)
        order = [(FWD, j, 0) for j in range(warmup)]
        for i in range(m - warmup):
            order.append((FWD, warmup + i, 0))
            order.append((BWD, i, 0))
        order.extend((BWD, j, 0) for j in range(m - warmup, m))
        return order

    if schedule is ScheduleKind.INTERLEAVED_ONE_F_ONE_B:
        if v < 2:
            raise ConfigError("interleaved schedule requires virtual_stages > 1")
        if m % p != 0:
            raise ConfigError(f"interleaved schedule needs microbatches % pp == 0, "
                              f"got {m} % {p}")
        total = m * v
        group = p * v

        def fwd_step(step: int) -> tuple[str, int, int]:
            chunk = (step % group) // p
            mb = step % p + (step // group) * p
            return (FWD, mb, chunk)

        def bwd_step(step: int) -> tuple[str, int, int]:
            chunk = v - 1 - (step % group) // p
            mb = step % p + (step // group) * p
            return (BWD, mb, chunk)

        warmup = min(total, (p - stage - 1) * 2 + (v - 1) * p)
        order = [fwd_step(i) for i in range(warmup)]
        for i in range(total - warmup):
            order.append(fwd_step(warmup + i))
            order.append(bwd_step(i))
        order.extend(bwd_step(i) for i in range(total - warmup, total))
        return order

    raise ConfigError(f"unknown schedule {schedule!r}")


# --- trace generation -----------------------------------------------------------

class _TraceBuilder:
    """Accumulates events with gap, call-index, version and handle bookkeeping."""

    def __init__(self, dispatch_overhead_ns: int):
        self.events: list = []
        self.overhead = dispatch_overhead_ns
        self.comm_nranks: dict[str, int] = {}
        self.call_idx: dict[str, int] = {}
        self.next_version: dict[int, int] = {}
        self.last_version: dict[int, int] = {}
        self.next_alloc = 0

    def gap(self) -> None:
        if self.overhead > 0:
            self.events.append(HostGap(self.overhead))

    def comm_init(self, comm_id: str, nranks: int, my_rank: int) -> None:
        self.comm_nranks[comm_id] = nranks
        self.call_idx[comm_id] = 0
        self.events.append(CommInit(comm_id, nranks, my_rank))

    def kernel(self, stream: int, spec: KernelSpec, dtype: str) -> None:
        self.gap()
        self.events.append(KernelLaunch(
            stream, spec.op_kind,
            KernelAttrs.make(spec.dims, dtype, spec.flops, spec.bytes)))

    def memcpy(self, stream: int, direction: str, nbytes: int) -> None:
        self.gap()
        self.events.append(Memcpy(stream, direction, nbytes))

    def memset(self, stream: int, nbytes: int) -> None:
        self.gap()
        self.events.append(Memset(stream, nbytes))

    def collective(self, stream: int, comm_id: str, kind: str, nbytes: int) -> None:
        idx = self.call_idx[comm_id]
        self.call_idx[comm_id] = idx + 1
        self.events.append(Collective(stream, comm_id, idx, kind,
                                      nbytes, self.comm_nranks[comm_id]))

    def record(self, stream: int, event_id: int) -> None:
        ver = self.next_version.get(event_id, 0)
        self.next_version[event_id] = ver + 1
        self.last_version[event_id] = ver
        self.events.append(EventRecord(stream, event_id, ver))

    def wait_last(self, stream: int, event_id: int) -> None:
        self.events.append(StreamWaitEvent(stream, event_id,
                                           self.last_version[event_id]))

    def alloc(self, nbytes: int) -> int:
        aid = self.next_alloc
        self.next_alloc += 1
        self.events.append(MemAlloc(aid, nbytes))
        return aid

    def free(self, aid: int) -> None:
        self.events.append(MemFree(aid))


def generate_trace(model: ModelSpec, config: ConfigPoint, cluster: ClusterSpec,
                   schedule: ScheduleKind, rank: int, seed: int = 0,
                   dispatch_overhead_ns: int = DEFAULT_DISPATCH_OVERHEAD_NS
                   ) -> WorkerTrace:
    """One full training iteration for ``rank``.

    Pure and deterministic: identical arguments give byte-identical traces
    (``seed`` is reserved for stochastic frontends and unused here).
    """
    require_valid(model, config, cluster, schedule)
    t, d = config.tp, config.dp(cluster)
    i, j, stage = rank_coords(rank, config, cluster)
    p, v = config.pp, config.virtual_stages
    total_vs = p * v
    m = config.microbatches
    b = config.microbatch_size(cluster)
    s, h, esz = model.seq_len, model.hidden_size, model.elem_size
    sp = config.seq_parallel
    u = t if sp else 1
    dtype = model.dtype

    bld = _TraceBuilder(dispatch_overhead_ns)
    for comm_id, nranks, my_rank in worker_comms(config, cluster, rank):
        bld.comm_init(comm_id, nranks, my_rank)

    # Stream and event-handle layout, in boundary order.
    chunks = _device_chunks(model, config, stage)
    p2p_stream: dict[tuple[int, str], int] = {}
    next_stream = _FIRST_P2P_STREAM
    eid: dict[tuple, int] = {}
    next_eid = 0

    def new_eid(key: tuple) -> None:
        nonlocal next_eid
        eid[key] = next_eid
        next_eid += 1

    for chunk in chunks:
        vs = chunk.vs
        if vs > 0:
            for role in ("fin", "bout"):
                p2p_stream[(vs - 1, role)] = next_stream
                next_stream += 1
            new_eid(("fin", vs - 1))
            new_eid(("bout", vs - 1))
        if vs < total_vs - 1:
            for role in ("fout", "bin"):
                p2p_stream[(vs, role)] = next_stream
                next_stream += 1
            new_eid(("fout", vs))
            new_eid(("bin", vs))
    for key in ("grads", "dp_done", "opt_done", "ag_done"):
        new_eid((key,))

    # Static allocations; gradients are zeroed up front.
    mem = device_memory_bytes(model, config, cluster, stage)
    bld.alloc(mem["params"])
    grads_bytes = mem["grads"]
    bld.alloc(grads_bytes)
    bld.alloc(mem["optimizer"])
    bld.memset(STREAM_COMPUTE, grads_bytes)

    p2p_payload = b * s * h * esz // u
    tp_coll_bytes = b * s * h * esz
    loss_reduce_bytes = b * s * 8
    tp_comm = _tp_comm(stage, j)
    act_ids: dict[tuple[int, int], int] = {}

    def tp_pair_fwd() -> None:
        # After a row-parallel gemm: AllReduce, or ReduceScatter under SP.
        if t > 1:
            kind = "ReduceScatter" if sp else "AllReduce"
            bld.collective(STREAM_COMPUTE, tp_comm, kind, tp_coll_bytes)

    def tp_gather_fwd() -> None:
        if t > 1 and sp:
            bld.collective(STREAM_COMPUTE, tp_comm, "AllGather", tp_coll_bytes)

    def emit_layer_fwd() -> None:
        ks = _layer_fwd_kernels(model, b, t, sp)
        bld.kernel(STREAM_COMPUTE, ks[0], dtype)      # layernorm 1
        tp_gather_fwd()
        for k in ks[1:6]:                             # qkv .. out_proj
            bld.kernel(STREAM_COMPUTE, k, dtype)
        tp_pair_fwd()
        bld.kernel(STREAM_COMPUTE, ks[6], dtype)      # residual add
        bld.kernel(STREAM_COMPUTE, ks[7], dtype)      # layernorm 2
        tp_gather_fwd()
        for k in ks[8:11]:                            # mlp up, gelu, mlp down
            bld.kernel(STREAM_COMPUTE, k, dtype)
        tp_pair_fwd()
        bld.kernel(STREAM_COMPUTE, ks[11], dtype)     # residual add

    def emit_layer_fwd_compute_only() -> None:
        for k in _layer_fwd_kernels(model, b, t, sp):
            bld.kernel(STREAM_COMPUTE, k, dtype)

    def emit_head_fwd(compute_only: bool) -> None:
        ks = _head_fwd_kernels(model, b, t, sp)
        bld.kernel(STREAM_COMPUTE, ks[0], dtype)
        if not compute_only:
            tp_gather_fwd()
        bld.kernel(STREAM_COMPUTE, ks[1], dtype)
        bld.kernel(STREAM_COMPUTE, ks[2], dtype)
        if not compute_only and t > 1:
            bld.collective(STREAM_COMPUTE, tp_comm, "AllReduce", loss_reduce_bytes)

    def emit_layer_bwd() -> None:
        ks = _layer_fwd_kernels(model, b, t, sp)
        mlp_bwd = _bwd_of(ks[7:12])      # ln2 .. add2 backward
        attn_bwd = _bwd_of(ks[0:7])      # ln1 .. add1 backward
        if t > 1:
            bld.collective(STREAM_COMPUTE, tp_comm,
                           "AllGather" if sp else "AllReduce", tp_coll_bytes)
        for k in mlp_bwd:
            bld.kernel(STREAM_COMPUTE, k, dtype)
        if t > 1 and sp:
            bld.collective(STREAM_COMPUTE, tp_comm, "ReduceScatter", tp_coll_bytes)
        if t > 1:
            bld.collective(STREAM_COMPUTE, tp_comm,
                           "AllGather" if sp else "AllReduce", tp_coll_bytes)
        for k in attn_bwd:
            bld.kernel(STREAM_COMPUTE, k, dtype)
        if t > 1 and sp:
            bld.collective(STREAM_COMPUTE, tp_comm, "ReduceScatter", tp_coll_bytes)

    def emit_forward(mb: int, chunk_id: int) -> None:
        chunk = chunks[chunk_id]
        vs = chunk.vs
        act_ids[(chunk_id, mb)] = bld.alloc(_chunk_stash_bytes(model, config, b, chunk))
        if vs > 0:
            fin = p2p_stream[(vs - 1, "fin")]
            bld.collective(fin, _pf_comm(vs - 1, i, j), "SendRecv", p2p_payload)
            bld.record(fin, eid[("fin", vs - 1)])
            bld.wait_last(STREAM_COMPUTE, eid[("fin", vs - 1)])
        else:
            bld.memcpy(STREAM_COMPUTE, "H2D", b * s * 8)
            for k in _embed_fwd_kernels(model, b, t, sp):
                bld.kernel(STREAM_COMPUTE, k, dtype)
        for _ in range(chunk.layers):
            emit_layer_fwd()
        if chunk.has_head:
            emit_head_fwd(compute_only=False)
        if vs < total_vs - 1:
            fout = p2p_stream[(vs, "fout")]
            bld.record(STREAM_COMPUTE, eid[("fout", vs)])
            bld.wait_last(fout, eid[("fout", vs)])
            bld.collective(fout, _pf_comm(vs, i, j), "SendRecv", p2p_payload)

    def emit_backward(mb: int, chunk_id: int) -> None:
        chunk = chunks[chunk_id]
        vs = chunk.vs
        if vs < total_vs - 1:
            bin_ = p2p_stream[(vs, "bin")]
            bld.collective(bin_, _pb_comm(vs, i, j), "SendRecv", p2p_payload)
            bld.record(bin_, eid[("bin", vs)])
            bld.wait_last(STREAM_COMPUTE, eid[("bin", vs)])
        if config.act_recompute:
            if chunk.has_embed:
                for k in _embed_fwd_kernels(model, b, t, sp):
                    bld.kernel(STREAM_COMPUTE, k, dtype)
            for _ in range(chunk.layers):
                emit_layer_fwd_compute_only()
            if chunk.has_head:
                emit_head_fwd(compute_only=True)
        if chunk.has_head:
            for k in _bwd_of(_head_fwd_kernels(model, b, t, sp)):
                bld.kernel(STREAM_COMPUTE, k, dtype)
        for _ in range(chunk.layers):
            emit_layer_bwd()
        if chunk.has_embed:
            for k in _embed_fwd_kernels(model, b, t, sp):
                bld.kernel(STREAM_COMPUTE, k, dtype)   # embedding grad scatter
        if vs > 0:
            bout = p2p_stream[(vs - 1, "bout")]
            bld.record(STREAM_COMPUTE, eid[("bout", vs - 1)])
            bld.wait_last(bout, eid[("bout", vs - 1)])
            bld.collective(bout, _pb_comm(vs - 1, i, j), "SendRecv", p2p_payload)
        bld.free(act_ids.pop((chunk_id, mb)))

    for phase, mb, chunk_id in pipeline_order(schedule, p, m, v, stage):
        if phase == FWD:
            emit_forward(mb, chunk_id)
        else:
            emit_backward(mb, chunk_id)

    # Gradient reduction (single end-of-backward bucket) and optimizer step.
    params = device_param_elems(model, config, stage)
    grad_comm_bytes = params * esz
    dp_comm = _dp_comm(i, stage)
    if d > 1:
        bld.record(STREAM_COMPUTE, eid[("grads",)])
        bld.wait_last(STREAM_GRAD_COMM, eid[("grads",)])
        kind = "ReduceScatter" if config.dist_optimizer else "AllReduce"
        bld.collective(STREAM_GRAD_COMM, dp_comm, kind, grad_comm_bytes)
        bld.record(STREAM_GRAD_COMM, eid[("dp_done",)])
        bld.wait_last(STREAM_COMPUTE, eid[("dp_done",)])
    bld.kernel(STREAM_COMPUTE,
               KernelSpec("optimizer_step", {"elems": params}, 6 * params, 16 * params),
               dtype)
    if d > 1 and config.dist_optimizer:
        bld.record(STREAM_COMPUTE, eid[("opt_done",)])
        bld.wait_last(STREAM_GRAD_COMM, eid[("opt_done",)])
        bld.collective(STREAM_GRAD_COMM, dp_comm, "AllGather", grad_comm_bytes)
        bld.record(STREAM_GRAD_COMM, eid[("ag_done",)])
        bld.wait_last(STREAM_COMPUTE, eid[("ag_done",)])
    bld.events.append(DeviceSynchronize())

    host, device = cluster.placement(rank)
    return WorkerTrace(rank, host, device, tuple(bld.events))


def generate_representatives(model: ModelSpec, config: ConfigPoint,
                             cluster: ClusterSpec, schedule: ScheduleKind,
                             seed: int = 0,
                             dispatch_overhead_ns: int = DEFAULT_DISPATCH_OVERHEAD_NS
                             ) -> tuple[list[WorkerTrace], ExpansionMap]:
    reps, expansion = unique_workers(config, cluster)
    traces = [generate_trace(model, config, cluster, schedule, r, seed,
                             dispatch_overhead_ns) for r in reps]
    return traces, expansion


def expected_trace_flops(model: ModelSpec, config: ConfigPoint,
                         cluster: ClusterSpec) -> int:
    """Closed-form flop total over all workers of one iteration, counted from
    the kernel inventory (including recomputation and TP replication) without
    generating any trace.  Must equal the expanded sum over generated traces."""
    t, d = config.tp, config.dp(cluster)
    m = config.microbatches
    b = config.microbatch_size(cluster)
    sp = config.seq_parallel
    total = 0
    for stage in range(config.pp):
        per_mb_fwd = 0
        for chunk in _device_chunks(model, config, stage):
            layer = sum(k.flops for k in _layer_fwd_kernels(model, b, t, sp))
            per_mb_fwd += chunk.layers * layer
            if chunk.has_head:
                per_mb_fwd += sum(k.flops for k in _head_fwd_kernels(model, b, t, sp))
        factor = 4 if config.act_recompute else 3   # fwd + 2x bwd (+ recompute)
        per_rank = m * per_mb_fwd * factor + 6 * device_param_elems(model, config, stage)
        total += per_rank * t * d
    return total


def profile_mode_annotate(trace: WorkerTrace,
                          timing_oracle: Callable[[str, KernelAttrs], int],
                          device_class: str) -> ProfileTable:
    """Ground-truth timing table for a trace, as if each kernel had been
    dispatched on real hardware and measured.

    The oracle maps (op_kind, attrs) to an observed duration; at desk scale
    an analytical estimator (optionally wrapped in ``noisy_oracle``) stands in
    for hardware.  Output rows feed TableEstimator training.
    """
    table = ProfileTable()
    for seq, ev in enumerate(trace.events):
        view = kernel_view(ev)
        if view is None:
            continue
        op_kind, attrs = view
        try:
            dur = timing_oracle(op_kind, attrs)
        except KeyError:
            raise ConfigError(f"timing oracle lacks op kind {op_kind!r} "
                              f"(seq {seq})") from None
        table.add(ProfileRow(op_kind, attrs, device_class, dur))
    return table


# --- model presets ---------------------------------------------------------------

def model_from_config(raw: Mapping) -> ModelSpec:
    return ModelSpec(
        name=str(raw.get("name", "model")),
        num_layers=int(raw["num_layers"]),
        hidden_size=int(raw["hidden_size"]),
        seq_len=int(raw["seq_len"]),
        vocab_size=int(raw["vocab_size"]),
        dtype=str(raw.get("dtype", "bf16")),
    )


def load_model(path: str) -> ModelSpec:
    with open(path) as f:
        return model_from_config(yaml.safe_load(f))


def load_model_preset(name: str) -> ModelSpec:
    """Bundled model shapes: gpt3-2.7b, gpt3-18.4b, tiny."""
    from importlib import resources
    ref = resources.files("dltsim") / "presets" / "models" / f"{name}.yaml"
    try:
        text = ref.read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown model preset {name!r}") from None
    return model_from_config(yaml.safe_load(text))


def config_from_mapping(raw: Mapping) -> ConfigPoint:
    return ConfigPoint(
        tp=int(raw.get("tp", 1)),
        pp=int(raw.get("pp", 1)),
        micro_mult=int(raw.get("micro_mult", 1)),
        virtual_stages=int(raw.get("virtual_stages", 1)),
        act_recompute=bool(raw.get("act_recompute", False)),
        seq_parallel=bool(raw.get("seq_parallel", False)),
        dist_optimizer=bool(raw.get("dist_optimizer", False)),
        global_batch=int(raw["global_batch"]),
    )


def load_config(path: str) -> ConfigPoint:
    with open(path) as f:
        return config_from_mapping(yaml.safe_load(f))

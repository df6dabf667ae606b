"""Collation: merge per-worker traces into one job-level trace.

Three responsibilities:

* structural canonicalization and rolling-hash signatures of worker traces,
  used to detect ranks that perform identical work (duplicates);
* the expansion map, which reconstructs omitted ranks from a representative:
  each omitted rank carries a communicator translation table (representative
  comm id -> (actual comm id, my_rank)) so the full communication pattern can
  be rebuilt from representatives alone;
* group resolution: matching every Collective across workers by
  (comm_id, call_idx), checking totality and consistency, and classifying
  each group's topology from cluster placement.

Canonical tokens deliberately exclude global rank, my_rank, communicator and
allocation identity, and host-gap durations: two workers doing identical work
on different data shards canonicalize identically, and wall-clock jitter must
not split duplicate classes.  Comm and alloc handles are normalized to their
order of first appearance, which preserves alias structure without identity.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .cluster import ClusterSpec
from .trace import (
    Collective, CommInit, DeviceSynchronize, EventRecord, EventSynchronize,
    HostGap, KernelLaunch, MemAlloc, MemFree, Memcpy, Memset,
    StreamSynchronize, StreamWaitEvent, TraceEvent, WorkerTrace,
    parse_trace, serialize_trace,
)

# 2**127 - 1 is prime; polynomial rolling hash state stays a single int.
_HASH_MOD = (1 << 127) - 1
_HASH_BASE = 0x9E3779B97F4A7C15F39CC0605CEDC835


class CollationError(Exception):
    pass


def canonicalize_event(ev: TraceEvent, comm_norm: dict[str, int],
                       alloc_norm: dict[int, int]) -> tuple:
    """Structural token of one event.

    ``comm_norm``/``alloc_norm`` carry first-appearance numbering and are
    updated in place; callers iterate a trace in order.
    """
    if isinstance(ev, HostGap):
        return ("gap",)
    if isinstance(ev, KernelLaunch):
        return ("kern", ev.stream, ev.op_kind, ev.attrs.dims, ev.attrs.dtype,
                ev.attrs.flops, ev.attrs.bytes_moved)
    if isinstance(ev, MemAlloc):
        idx = alloc_norm.setdefault(ev.alloc_id, len(alloc_norm))
        return ("alloc", idx, ev.bytes)
    if isinstance(ev, MemFree):
        idx = alloc_norm.setdefault(ev.alloc_id, len(alloc_norm))
        return ("free", idx)
    if isinstance(ev, Memcpy):
        return ("memcpy", ev.stream, ev.direction, ev.bytes)
    if isinstance(ev, Memset):
        return ("memset", ev.stream, ev.bytes)
    if isinstance(ev, EventRecord):
        return ("rec", ev.stream, ev.event_id, ev.version)
    if isinstance(ev, StreamWaitEvent):
        return ("wait", ev.stream, ev.event_id, ev.version)
    if isinstance(ev, EventSynchronize):
        return ("esync", ev.event_id, ev.version)
    if isinstance(ev, StreamSynchronize):
        return ("ssync", ev.stream)
    if isinstance(ev, DeviceSynchronize):
        return ("dsync",)
    if isinstance(ev, CommInit):
        idx = comm_norm.setdefault(ev.comm_id, len(comm_norm))
        return ("cinit", idx, ev.nranks)
    if isinstance(ev, Collective):
        idx = comm_norm.setdefault(ev.comm_id, len(comm_norm))
        return ("coll", ev.stream, idx, ev.call_idx, ev.kind, ev.bytes, ev.nranks)
    raise TypeError(f"unknown event type {type(ev)!r}")


def canonical_tokens(trace: WorkerTrace) -> tuple[tuple, ...]:
    comm_norm: dict[str, int] = {}
    alloc_norm: dict[int, int] = {}
    return tuple(canonicalize_event(ev, comm_norm, alloc_norm) for ev in trace.events)


@dataclass(frozen=True)
class WorkerSignature:
    """128-bit polynomial rolling hash over canonical tokens, plus length.

    Equal signatures are confirmed by full canonical-sequence comparison
    before two workers are declared duplicates.
    """

    digest: int
    length: int

    @staticmethod
    def of_tokens(tokens: Iterable[tuple]) -> "WorkerSignature":
        state = 0
        n = 0
        for tok in tokens:
            h = int.from_bytes(
                hashlib.blake2b(repr(tok).encode(), digest_size=16).digest(), "big")
            state = (state * _HASH_BASE + h) % _HASH_MOD
            n += 1
        return WorkerSignature(state, n)

    @staticmethod
    def of_trace(trace: WorkerTrace) -> "WorkerSignature":
        return WorkerSignature.of_tokens(canonical_tokens(trace))


@dataclass(frozen=True)
class DupEntry:
    """One omitted rank: its representative plus the communicator translation.

    ``comm_map`` maps every comm id appearing in the representative's trace to
    the (comm id, my_rank) this rank would have used for the same role.
    """

    rep: int
    comm_map: Mapping[str, tuple[str, int]]


ExpansionMap = dict[int, DupEntry]


def dedup_workers(traces: Sequence[WorkerTrace]) -> tuple[list[WorkerTrace], ExpansionMap]:
    """Partition workers into structural-duplicate classes.

    Returns one representative per class (the lowest rank) and a total map
    from every omitted rank to its representative.  Hash matches are
    confirmed by comparing full canonical sequences.
    """
    by_rank = sorted(traces, key=lambda t: t.global_rank)
    classes: dict[WorkerSignature, list[tuple[WorkerTrace, tuple]]] = {}
    for tr in by_rank:
        toks = canonical_tokens(tr)
        sig = WorkerSignature.of_tokens(toks)
        classes.setdefault(sig, []).append((tr, toks))

    reps: list[WorkerTrace] = []
    expansion: ExpansionMap = {}
    for sig in sorted(classes, key=lambda s: (s.length, s.digest)):
        members = classes[sig]
        # Collision guard: split the bucket by actual token equality.
        groups: list[list[tuple[WorkerTrace, tuple]]] = []
        for tr, toks in members:
            for g in groups:
                if g[0][1] == toks:
                    g.append((tr, toks))
                    break
            else:
                groups.append([(tr, toks)])
        for g in groups:
            rep = g[0][0]
            reps.append(rep)
            rep_comms = [ev for ev in rep.events if isinstance(ev, CommInit)]
            for tr, _ in g[1:]:
                dup_comms = [ev for ev in tr.events if isinstance(ev, CommInit)]
                comm_map = {
                    rc.comm_id: (dc.comm_id, dc.my_rank)
                    for rc, dc in zip(rep_comms, dup_comms)
                }
                expansion[tr.global_rank] = DupEntry(rep.global_rank, comm_map)
    reps.sort(key=lambda t: t.global_rank)
    return reps, expansion


def compose_expansion(outer: ExpansionMap, inner: ExpansionMap) -> ExpansionMap:
    """Chain expansions: ``outer`` maps ranks onto traces that ``inner`` may
    further collapse.  Result points every rank at a final representative."""
    out: ExpansionMap = dict(inner)
    for rank, entry in outer.items():
        via = inner.get(entry.rep)
        if via is None:
            out[rank] = entry
        else:
            # entry.comm_map keys are entry.rep's comms; re-key them to the
            # final representative's comms through via.comm_map.
            comm_map = {
                final_comm: entry.comm_map[mid_comm]
                for final_comm, (mid_comm, _) in via.comm_map.items()
            }
            out[rank] = DupEntry(via.rep, comm_map)
    return out


@dataclass(frozen=True)
class CommGroup:
    comm_id: str
    nranks: int
    ranks: tuple[int, ...]      # indexed by my_rank position
    topology: str


@dataclass(frozen=True)
class CollectiveGroupRecord:
    comm_id: str
    call_idx: int
    kind: str
    bytes: int
    nranks: int
    ranks: tuple[int, ...]
    topology: str


@dataclass(frozen=True)
class JobTrace:
    """Job-level trace: representatives, expansion, and the resolved
    collective table over the whole cluster."""

    cluster: ClusterSpec
    reps: Mapping[int, WorkerTrace]
    dup_of: Mapping[int, int]                       # omitted rank -> rep rank
    comm_map: Mapping[int, Mapping[str, tuple[str, int]]]  # per rank, rep comm -> (comm, my_rank)
    groups: Mapping[str, CommGroup]
    calls: Mapping[tuple[str, int], tuple[str, int]]        # (comm, idx) -> (kind, bytes)

    @property
    def num_ranks(self) -> int:
        return len(self.reps) + len(self.dup_of)

    def all_ranks(self) -> list[int]:
        return sorted(list(self.reps) + list(self.dup_of))

    def rep_of(self, rank: int) -> int:
        return self.dup_of.get(rank, rank)

    def trace_of(self, rank: int) -> WorkerTrace:
        return self.reps[self.rep_of(rank)]

    def translate_comm(self, rank: int, comm_id: str) -> str:
        return self.comm_map[rank][comm_id][0]

    def group_records(self) -> list[CollectiveGroupRecord]:
        out = []
        for (comm, idx), (kind, nbytes) in sorted(self.calls.items()):
            g = self.groups[comm]
            out.append(CollectiveGroupRecord(comm, idx, kind, nbytes, g.nranks,
                                             g.ranks, g.topology))
        return out

    def total_flops(self) -> int:
        per_rep = {r: tr.total_flops() for r, tr in self.reps.items()}
        return sum(per_rep[self.rep_of(r)] for r in self.all_ranks())


def collate(traces: Sequence[WorkerTrace], expansion: ExpansionMap,
            cluster: ClusterSpec) -> JobTrace:
    """Resolve collectives across workers and build the JobTrace.

    ``traces`` are the representatives; ``expansion`` reconstructs every
    omitted rank.  Output is independent of the order of ``traces``.
    """
    reps = {tr.global_rank: tr for tr in traces}
    if len(reps) != len(traces):
        raise CollationError("duplicate representative ranks in input")
    for rank, entry in expansion.items():
        if rank in reps:
            raise CollationError(f"rank {rank} is both representative and duplicate")
        if entry.rep not in reps:
            raise CollationError(f"duplicate rank {rank} references missing rep {entry.rep}")

    all_ranks = sorted(list(reps) + list(expansion))
    if all_ranks != list(range(cluster.num_devices)):
        raise CollationError(
            f"job covers ranks {all_ranks[:4]}..., cluster expects 0..{cluster.num_devices - 1}")
    for rank, tr in reps.items():
        if (tr.host_index, tr.device_index) != cluster.placement(rank):
            raise CollationError(
                f"rank {rank} trace claims slot (host {tr.host_index}, device "
                f"{tr.device_index}) but cluster places it at {cluster.placement(rank)}")

    # Per-rank communicator view: rep comm id -> (actual comm id, my_rank).
    comm_map: dict[int, dict[str, tuple[str, int]]] = {}
    for rank in all_ranks:
        rep = expansion[rank].rep if rank in expansion else rank
        rep_inits = [ev for ev in reps[rep].events if isinstance(ev, CommInit)]
        if rank in expansion:
            cm = expansion[rank].comm_map
            missing = [ci.comm_id for ci in rep_inits if ci.comm_id not in cm]
            if missing:
                raise CollationError(
                    f"expansion for rank {rank} lacks translation for comm {missing[0]}")
            comm_map[rank] = {ci.comm_id: cm[ci.comm_id] for ci in rep_inits}
        else:
            comm_map[rank] = {ci.comm_id: (ci.comm_id, ci.my_rank) for ci in rep_inits}

    # Membership: comm -> position -> rank.
    members: dict[str, dict[int, int]] = {}
    declared_nranks: dict[str, int] = {}
    for rank in all_ranks:
        rep = expansion[rank].rep if rank in expansion else rank
        for ci in reps[rep].events:
            if not isinstance(ci, CommInit):
                continue
            comm, my_rank = comm_map[rank][ci.comm_id]
            if declared_nranks.setdefault(comm, ci.nranks) != ci.nranks:
                raise CollationError(f"comm {comm}: inconsistent nranks declarations")
            slot = members.setdefault(comm, {})
            if my_rank in slot:
                raise CollationError(
                    f"comm {comm}: position {my_rank} claimed by ranks {slot[my_rank]} and {rank}")
            slot[my_rank] = rank

    groups: dict[str, CommGroup] = {}
    for comm in sorted(members):
        n = declared_nranks[comm]
        slot = members[comm]
        if sorted(slot) != list(range(n)):
            missing = [q for q in range(n) if q not in slot]
            raise CollationError(f"comm {comm}: unresolved positions {missing} of {n}")
        ranks = tuple(slot[q] for q in range(n))
        groups[comm] = CommGroup(comm, n, ranks, cluster.topology_of(ranks))

    # Per-representative call sequences, then totality/consistency per group.
    rep_calls: dict[int, dict[str, list[tuple[int, str, int, int]]]] = {}
    for rep, tr in reps.items():
        per: dict[str, list[tuple[int, str, int, int]]] = {}
        for ev in tr.events:
            if isinstance(ev, Collective):
                per.setdefault(ev.comm_id, []).append(
                    (ev.call_idx, ev.kind, ev.bytes, ev.nranks))
        rep_calls[rep] = per

    calls: dict[tuple[str, int], tuple[str, int]] = {}
    seen_by: dict[str, dict[int, list[tuple[int, str, int, int]]]] = {}
    for rank in all_ranks:
        rep = expansion[rank].rep if rank in expansion else rank
        for rep_comm, seq in rep_calls[rep].items():
            comm, _ = comm_map[rank][rep_comm]
            seen_by.setdefault(comm, {})[rank] = seq

    for comm in sorted(seen_by):
        group = groups.get(comm)
        if group is None:
            raise CollationError(f"collective on comm {comm} without CommInit resolution")
        per_rank = seen_by[comm]
        absent = [r for r in group.ranks if r not in per_rank]
        if absent:
            raise CollationError(
                f"unmatched collective: comm {comm} never joined by ranks {absent}")
        ref_rank = group.ranks[0]
        ref = per_rank[ref_rank]
        for r in group.ranks[1:]:
            other = per_rank[r]
            if len(other) != len(ref):
                k = min(len(other), len(ref))
                raise CollationError(
                    f"unmatched collective: comm {comm} idx {k} missing on "
                    f"rank {r if len(other) < len(ref) else ref_rank}")
            for (ia, ka, ba, na), (ib, kb, bb, nb) in zip(ref, other):
                if (ia, ka, ba, na) != (ib, kb, bb, nb):
                    raise CollationError(
                        f"inconsistent collective on comm {comm} idx {ia}: "
                        f"rank {ref_rank} says ({ka},{ba}b,n{na}), rank {r} says ({kb},{bb}b,n{nb})")
        for idx, kind, nbytes, nranks in ref:
            if nranks != group.nranks:
                raise CollationError(
                    f"comm {comm} idx {idx}: event nranks {nranks} != group {group.nranks}")
            calls[(comm, idx)] = (kind, nbytes)

    dup_of = {rank: entry.rep for rank, entry in expansion.items()}
    return JobTrace(cluster, reps, dup_of, comm_map, groups, calls)


# --- manifest persistence -----------------------------------------------------

def save_job(job: JobTrace, out_dir: str, manifest_name: str = "job.manifest") -> str:
    """Write representative traces plus the job manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"dltsim-job v1 ranks={job.num_ranks}"]
    for rank in sorted(job.reps):
        fname = f"rank_{rank}.trace"
        with open(os.path.join(out_dir, fname), "w") as f:
            serialize_trace(job.reps[rank], f)
        lines.append(f"worker rank={rank} file={fname}")
    for rank in sorted(job.dup_of):
        lines.append(f"dup rank={rank} rep={job.dup_of[rank]}")
        for src, (dst, q) in sorted(job.comm_map[rank].items()):
            lines.append(f"dupcomm rank={rank} from={src} to={dst} myrank={q}")
    for comm in sorted(job.groups):
        g = job.groups[comm]
        ranks = ",".join(str(r) for r in g.ranks)
        lines.append(f"comm id={comm} nranks={g.nranks} topo={g.topology} ranks={ranks}")
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


def load_job(manifest_path: str, cluster: ClusterSpec) -> JobTrace:
    """Load a manifest and re-collate; group resolution is re-verified."""
    base = os.path.dirname(manifest_path)
    traces: list[WorkerTrace] = []
    expansion: ExpansionMap = {}
    raw_maps: dict[int, dict[str, tuple[str, int]]] = {}
    dup_rep: dict[int, int] = {}
    with open(manifest_path) as f:
        header = f.readline().strip()
        if not header.startswith("dltsim-job v1"):
            raise CollationError(f"bad manifest header: {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            kind, _, rest = line.partition(" ")
            kv = dict(tok.split("=", 1) for tok in rest.split(" "))
            if kind == "worker":
                with open(os.path.join(base, kv["file"])) as tf:
                    traces.append(parse_trace(tf))
            elif kind == "dup":
                dup_rep[int(kv["rank"])] = int(kv["rep"])
            elif kind == "dupcomm":
                raw_maps.setdefault(int(kv["rank"]), {})[kv["from"]] = (
                    kv["to"], int(kv["myrank"]))
            elif kind == "comm":
                pass  # derived; re-verified by collate below
            else:
                raise CollationError(f"unknown manifest line kind {kind!r}")
    for rank, rep in dup_rep.items():
        expansion[rank] = DupEntry(rep, raw_maps.get(rank, {}))
    return collate(traces, expansion, cluster)

"""Pluggable runtime estimation for kernels and collectives.

Two reference kernel estimators ship here:

* RooflineEstimator: duration = max(compute limb, memory limb) + overhead,
  where the compute limb is flops / (peak * efficiency) and the memory limb
  is bytes / HBM bandwidth.  Efficiency is a per-op-kind constant (0.6 for
  gemm, 0.8 for the bundled memory-bound kernels); unknown op kinds fall back
  to 0.5 and are reported as warnings by annotate().
* TableEstimator: nearest-neighbor interpolation over a ProfileTable of
  observed durations.  An exact (op_kind, attrs, device) match returns the
  observed duration; otherwise the two nearest rows along total work
  (flops, or bytes for zero-flop kernels) interpolate log-linearly.  Op kinds
  absent from the table delegate to a roofline fallback.

Collective wire time is a shared alpha-beta model per kind; alpha/beta come
from the device class link matching the group's topology class.  All
estimators are pure and immutable: identical queries return identical
durations, bit-exact.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Protocol

from .cluster import DeviceClass
from .collate import JobTrace
from .trace import Collective, KernelAttrs, KernelLaunch, Memcpy, Memset

NS_PER_S = 1_000_000_000

DEFAULT_KERNEL_OVERHEAD_NS = 1000

# Per-op-kind compute-limb efficiency; anything else falls back to 1/2.
# Pure data movers carry an entry so they count as known op kinds, though
# their zero flop count means the value never applies.
DEFAULT_EFFICIENCY: Mapping[str, float] = {
    "gemm": 0.6,
    "layernorm": 0.8,
    "softmax": 0.8,
    "gelu": 0.8,
    "add": 0.8,
    "embed": 0.8,
    "cross_entropy": 0.8,
    "optimizer_step": 0.8,
    "memcpy_h2d": 0.8,
    "memcpy_d2h": 0.8,
    "memcpy_d2d": 0.8,
    "memset": 0.8,
}
FALLBACK_EFFICIENCY = 0.5


class EstimationError(Exception):
    pass


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class EstimatorInterface(Protocol):
    """What annotate() needs: pure per-kernel and per-collective durations."""

    def estimate_kernel(self, op_kind: str, attrs: KernelAttrs,
                        device: DeviceClass) -> int: ...

    def estimate_collective(self, kind: str, bytes: int, nranks: int,
                            topology: str, device: DeviceClass) -> int: ...

    def unknown_op(self, op_kind: str) -> bool: ...


def collective_estimate(kind: str, bytes: int, nranks: int, topology: str,
                        device: DeviceClass) -> int:
    """Alpha-beta wire-time model per collective kind.

    Ring AllReduce: 2(n-1) steps moving bytes/n each; AllGather and
    ReduceScatter are one such phase; Broadcast and SendRecv are a single
    transfer.  Single-rank groups cost nothing.
    """
    if nranks < 1:
        raise EstimationError(f"collective with nranks {nranks}")
    if nranks == 1:
        return 0
    link = device.link(topology)
    a, beta = link.alpha_ns, link.beta_bytes_per_s
    n = nranks
    if kind == "AllReduce":
        return 2 * (n - 1) * a + _ceil_div(2 * (n - 1) * bytes * NS_PER_S, n * beta)
    if kind in ("AllGather", "ReduceScatter"):
        return (n - 1) * a + _ceil_div((n - 1) * bytes * NS_PER_S, n * beta)
    if kind in ("Broadcast", "SendRecv"):
        return a + _ceil_div(bytes * NS_PER_S, beta)
    raise EstimationError(f"unknown collective kind {kind!r}")


@dataclass(frozen=True)
class RooflineEstimator:
    """Analytical kernel estimator; see module docstring for the formula.

    ``efficiency`` overrides the per-op-kind compute efficiencies (values are
    parsed exactly through their decimal representation, so 0.5 means 1/2).
    """

    efficiency: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_EFFICIENCY))
    overhead_ns: int = DEFAULT_KERNEL_OVERHEAD_NS

    def _eff(self, op_kind: str) -> Fraction:
        return Fraction(str(self.efficiency.get(op_kind, FALLBACK_EFFICIENCY)))

    def unknown_op(self, op_kind: str) -> bool:
        return op_kind not in self.efficiency

    def estimate_kernel(self, op_kind: str, attrs: KernelAttrs,
                        device: DeviceClass) -> int:
        compute = 0
        if attrs.flops > 0:
            peak = device.peak_flops.get(attrs.dtype)
            if peak is None:
                raise EstimationError(
                    f"device {device.name!r} has no peak rate for dtype {attrs.dtype!r}")
            eff = self._eff(op_kind)
            compute = _ceil_div(attrs.flops * NS_PER_S * eff.denominator,
                                peak * eff.numerator)
        memory = 0
        if attrs.bytes_moved > 0:
            memory = _ceil_div(attrs.bytes_moved * NS_PER_S, device.hbm_bytes_per_s)
        return max(compute, memory) + self.overhead_ns

    def estimate_collective(self, kind: str, bytes: int, nranks: int,
                            topology: str, device: DeviceClass) -> int:
        return collective_estimate(kind, bytes, nranks, topology, device)


@dataclass(frozen=True)
class ProfileRow:
    op_kind: str
    attrs: KernelAttrs
    device_class: str
    duration_ns: int


class ProfileTable:
    """Observed kernel durations keyed by (op_kind, attrs, device class).

    Exact keys are unique; per (op_kind, device) an index sorted by total
    work backs the interpolation path.
    """

    def __init__(self, rows: list[ProfileRow] | None = None):
        self._exact: dict[tuple, int] = {}
        self._by_family: dict[tuple[str, str], list[tuple[int, int]]] = {}
        self.rows: list[ProfileRow] = []
        self.op_kinds: set[str] = set()
        for row in rows or []:
            self.add(row)

    @staticmethod
    def _key(op_kind: str, attrs: KernelAttrs, device_class: str) -> tuple:
        return (op_kind, attrs, device_class)

    @staticmethod
    def work_of(attrs: KernelAttrs) -> int:
        return attrs.flops if attrs.flops > 0 else attrs.bytes_moved

    def add(self, row: ProfileRow) -> None:
        if row.duration_ns <= 0:
            raise EstimationError(f"profile row with nonpositive duration: {row}")
        key = self._key(row.op_kind, row.attrs, row.device_class)
        known = self._exact.get(key)
        if known is not None:
            if known != row.duration_ns:
                raise EstimationError(
                    f"conflicting durations for {row.op_kind} {row.attrs}: "
                    f"{known} vs {row.duration_ns}")
            return
        self._exact[key] = row.duration_ns
        self.rows.append(row)
        self.op_kinds.add(row.op_kind)
        work = self.work_of(row.attrs)
        if work > 0:
            fam = self._by_family.setdefault((row.op_kind, row.device_class), [])
            fam.append((work, row.duration_ns))
            fam.sort()

    def __len__(self) -> int:
        return len(self.rows)

    def lookup(self, op_kind: str, attrs: KernelAttrs, device_class: str) -> int | None:
        exact = self._exact.get(self._key(op_kind, attrs, device_class))
        if exact is not None:
            return exact
        fam = self._by_family.get((op_kind, device_class))
        if not fam:
            return None
        work = self.work_of(attrs)
        if work <= 0:
            return fam[0][1]
        if len(fam) == 1:
            w0, d0 = fam[0]
            return max(1, round(d0 * work / w0))
        lw = math.log(work)
        ranked = sorted(fam, key=lambda r: (abs(math.log(r[0]) - lw), r[0]))
        (w1, d1), (w2, d2) = sorted(ranked[:2])
        if w1 == w2:
            return d1
        frac = (lw - math.log(w1)) / (math.log(w2) - math.log(w1))
        return max(1, round(math.exp(math.log(d1) + frac * (math.log(d2) - math.log(d1)))))

    # file format: <op_kind> dtype=.. flops=.. bytes=.. [a.<dim>=..] <device_class> <ns>
    def save(self, path: str) -> None:
        with open(path, "w") as f:
            for row in self.rows:
                toks = [row.op_kind, f"dtype={row.attrs.dtype}",
                        f"flops={row.attrs.flops}", f"bytes={row.attrs.bytes_moved}"]
                toks += [f"a.{k}={v}" for k, v in row.attrs.dims]
                toks += [row.device_class, str(row.duration_ns)]
                f.write(" ".join(toks) + "\n")

    @staticmethod
    def load(path: str) -> "ProfileTable":
        table = ProfileTable()
        with open(path) as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                toks = line.split(" ")
                if len(toks) < 6:
                    raise EstimationError(f"{path}:{line_no}: malformed profile row")
                op_kind, device_class, dur = toks[0], toks[-2], int(toks[-1])
                kv = dict(t.split("=", 1) for t in toks[1:-2])
                dims = {k[2:]: int(v) for k, v in kv.items() if k.startswith("a.")}
                attrs = KernelAttrs.make(dims, kv["dtype"], int(kv["flops"]), int(kv["bytes"]))
                table.add(ProfileRow(op_kind, attrs, device_class, dur))
        return table


@dataclass(frozen=True)
class TableEstimator:
    """Profile-table interpolation with roofline fallback for unseen op kinds."""

    table: ProfileTable
    fallback: RooflineEstimator = field(default_factory=RooflineEstimator)

    def unknown_op(self, op_kind: str) -> bool:
        return op_kind not in self.table.op_kinds

    def estimate_kernel(self, op_kind: str, attrs: KernelAttrs,
                        device: DeviceClass) -> int:
        got = self.table.lookup(op_kind, attrs, device.name)
        if got is not None:
            return got
        return self.fallback.estimate_kernel(op_kind, attrs, device)

    def estimate_collective(self, kind: str, bytes: int, nranks: int,
                            topology: str, device: DeviceClass) -> int:
        return collective_estimate(kind, bytes, nranks, topology, device)


def roofline_estimate(op_kind: str, attrs: KernelAttrs, device: DeviceClass,
                      efficiency: Mapping[str, float] | None = None,
                      overhead_ns: int = DEFAULT_KERNEL_OVERHEAD_NS) -> int:
    """Free-function form of the roofline estimator."""
    est = RooflineEstimator(efficiency or dict(DEFAULT_EFFICIENCY), overhead_ns)
    return est.estimate_kernel(op_kind, attrs, device)


def table_estimate(table: "ProfileTable", op_kind: str, attrs: KernelAttrs,
                   device: DeviceClass) -> int:
    """Free-function form of table interpolation with roofline fallback."""
    return TableEstimator(table).estimate_kernel(op_kind, attrs, device)


def noisy_oracle(base: Callable[[str, KernelAttrs], int], rel_noise: float,
                 seed: int) -> Callable[[str, KernelAttrs], int]:
    """Deterministic multiplicative noise around a timing oracle.

    The factor is derived from (seed, op_kind, attrs), so repeated queries of
    one key agree and rebuilding with the same seed reproduces the table.
    """

    def oracle(op_kind: str, attrs: KernelAttrs) -> int:
        h = hashlib.blake2b(f"{seed}|{op_kind}|{attrs}".encode(), digest_size=8)
        rng = random.Random(int.from_bytes(h.digest(), "big"))
        factor = 1.0 + rng.uniform(-rel_noise, rel_noise)
        return max(1, round(base(op_kind, attrs) * factor))

    return oracle


# --- annotation ----------------------------------------------------------------

MEMCPY_OP_KINDS = {"H2D": "memcpy_h2d", "D2H": "memcpy_d2h", "D2D": "memcpy_d2d"}


def kernel_view(ev) -> tuple[str, KernelAttrs] | None:
    """Uniform (op_kind, attrs) view of the estimable event kinds."""
    if isinstance(ev, KernelLaunch):
        return ev.op_kind, ev.attrs
    if isinstance(ev, Memcpy):
        return MEMCPY_OP_KINDS[ev.direction], KernelAttrs.make({}, "fp32", 0, ev.bytes)
    if isinstance(ev, Memset):
        return "memset", KernelAttrs.make({}, "fp32", 0, ev.bytes)
    return None


@dataclass(frozen=True)
class AnnotatedJob:
    """JobTrace plus predicted durations.

    Kernel durations are keyed by (representative rank, seq); duplicates
    reuse their representative's annotations.  Collectives carry one wire
    duration per group, keyed by (comm, call_idx).
    """

    job: JobTrace
    kernel_ns: Mapping[tuple[int, int], int]
    wire_ns: Mapping[tuple[str, int], int]
    warnings: tuple[str, ...] = ()


def annotate(job: JobTrace, estimator: EstimatorInterface) -> AnnotatedJob:
    """Attach durations to every kernel-class event and collective group.

    Host gaps pass through unchanged (they already carry durations).
    Estimator failures are re-raised with the offending event's context.
    """
    device = job.cluster.device
    kernel_ns: dict[tuple[int, int], int] = {}
    warned: set[str] = set()
    for rank in sorted(job.reps):
        for seq, ev in enumerate(job.reps[rank].events):
            view = kernel_view(ev)
            if view is None:
                continue
            op_kind, attrs = view
            try:
                dur = estimator.estimate_kernel(op_kind, attrs, device)
            except EstimationError as exc:
                raise EstimationError(f"rank {rank} seq {seq}: {exc}") from exc
            if dur < 0:
                raise EstimationError(f"rank {rank} seq {seq}: negative duration {dur}")
            kernel_ns[(rank, seq)] = dur
            if estimator.unknown_op(op_kind):
                warned.add(op_kind)

    wire_ns: dict[tuple[str, int], int] = {}
    for rec in job.group_records():
        wire_ns[(rec.comm_id, rec.call_idx)] = estimator.estimate_collective(
            rec.kind, rec.bytes, rec.nranks, rec.topology, device)

    warnings = tuple(f"no estimator profile for op kind {op!r}, used fallback"
                     for op in sorted(warned))
    return AnnotatedJob(job, kernel_ns, wire_ns, warnings)

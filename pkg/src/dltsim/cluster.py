"""Cluster and device-class descriptions shared by estimation and simulation.

A DeviceClass carries the performance envelope used by the reference
estimators (peak FLOP rates per dtype, HBM bandwidth, and alpha/beta link
characteristics for the intra-host and inter-host network classes).  A
ClusterSpec places ranks onto (host, device) slots and fixes per-device
memory capacity.

Alpha is latency per communication step in ns; beta is link bandwidth in
bytes/s.  Presets "fast" and "slow" ship as package data; real clusters
should be described with measured numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping

import yaml

INTRA_HOST = "intra_host"
INTER_HOST = "inter_host"
MIXED = "mixed"

TOPOLOGY_CLASSES = (INTRA_HOST, INTER_HOST, MIXED)


@dataclass(frozen=True)
class LinkClass:
    alpha_ns: int
    beta_bytes_per_s: int

    def __post_init__(self):
        if self.alpha_ns < 0 or self.beta_bytes_per_s <= 0:
            raise ValueError("link alpha must be >= 0 and beta > 0")


@dataclass(frozen=True)
class DeviceClass:
    name: str
    peak_flops: Mapping[str, int]       # dtype -> FLOP/s
    hbm_bytes_per_s: int
    links: Mapping[str, LinkClass]      # intra_host / inter_host

    def __post_init__(self):
        if self.hbm_bytes_per_s <= 0:
            raise ValueError("hbm bandwidth must be positive")
        if any(v <= 0 for v in self.peak_flops.values()):
            raise ValueError("peak flops must be positive")
        for cls in (INTRA_HOST, INTER_HOST):
            if cls not in self.links:
                raise ValueError(f"device class {self.name!r} missing {cls} link")

    def link(self, topology: str) -> LinkClass:
        # The mixed class is priced at inter-host rates: the slowest hop bounds it.
        if topology == MIXED:
            return self.links[INTER_HOST]
        return self.links[topology]


@dataclass(frozen=True)
class ClusterSpec:
    num_hosts: int
    devices_per_host: int
    device_memory_bytes: int
    device: DeviceClass

    def __post_init__(self):
        if self.num_hosts < 1 or self.devices_per_host < 1:
            raise ValueError("cluster must have at least one host and device")
        if self.device_memory_bytes <= 0:
            raise ValueError("device memory capacity must be positive")

    @property
    def num_devices(self) -> int:
        return self.num_hosts * self.devices_per_host

    def placement(self, global_rank: int) -> tuple[int, int]:
        """Map a global rank to its (host, device) slot; a bijection."""
        if not (0 <= global_rank < self.num_devices):
            raise ValueError(f"rank {global_rank} outside cluster of {self.num_devices}")
        return divmod(global_rank, self.devices_per_host)

    def topology_of(self, ranks: Iterable[int]) -> str:
        """Classify a rank group: one host, all distinct hosts, or mixed."""
        hosts = [self.placement(r)[0] for r in ranks]
        if len(set(hosts)) == 1:
            return INTRA_HOST
        if len(set(hosts)) == len(hosts):
            return INTER_HOST
        return MIXED


def _device_from_mapping(raw: Mapping) -> DeviceClass:
    links = {
        name: LinkClass(int(spec["alpha_ns"]), int(spec["beta_bytes_per_s"]))
        for name, spec in raw["links"].items()
    }
    return DeviceClass(
        name=str(raw["name"]),
        peak_flops={k: int(v) for k, v in raw["peak_flops"].items()},
        hbm_bytes_per_s=int(raw["hbm_bytes_per_s"]),
        links=links,
    )


def load_device_preset(name: str) -> DeviceClass:
    """Load a bundled device preset ("fast", "slow") by name."""
    ref = resources.files("dltsim") / "presets" / f"{name}.yaml"
    try:
        text = ref.read_text()
    except FileNotFoundError:
        raise ValueError(f"unknown device preset {name!r}") from None
    return _device_from_mapping(yaml.safe_load(text))


def device_from_config(raw) -> DeviceClass:
    """Accept either a preset name or an inline device mapping."""
    if isinstance(raw, str):
        return load_device_preset(raw)
    return _device_from_mapping(raw)


def cluster_from_config(raw: Mapping) -> ClusterSpec:
    return ClusterSpec(
        num_hosts=int(raw["hosts"]),
        devices_per_host=int(raw["devices_per_host"]),
        device_memory_bytes=int(raw["device_memory_bytes"]),
        device=device_from_config(raw["device"]),
    )


def load_cluster(path: str) -> ClusterSpec:
    with open(path) as f:
        return cluster_from_config(yaml.safe_load(f))

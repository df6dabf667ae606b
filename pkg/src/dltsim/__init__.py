"""dltsim: trace-driven performance prediction for distributed DL training.

Pipeline: a workload frontend emits device-API traces per unique worker; the
collator merges and deduplicates them into a job trace; pluggable estimators
annotate kernels and collectives with durations; a discrete-event simulator
replays the annotated job over a cluster description; a search layer explores
training-configuration spaces on top of the whole pipeline.
"""

__version__ = "0.1.0"

from .cluster import ClusterSpec, DeviceClass, LinkClass, load_device_preset
from .collate import (JobTrace, CollationError, collate, dedup_workers,
                      canonical_tokens, WorkerSignature)
from .estimate import (AnnotatedJob, ProfileTable, RooflineEstimator,
                       TableEstimator, annotate, collective_estimate)
from .sim import SimReport, SimDeadlockError, compute_mfu, simulate
from .trace import (TraceEvent, WorkerTrace, parse_trace, serialize_trace,
                    validate_trace)
from .workload import (ConfigPoint, ModelSpec, ScheduleKind, ConfigError,
                       generate_trace, unique_workers, pipeline_order)

__all__ = [
    "AnnotatedJob", "ClusterSpec", "CollationError", "ConfigError",
    "ConfigPoint", "DeviceClass", "JobTrace", "LinkClass", "ModelSpec",
    "ProfileTable", "RooflineEstimator", "ScheduleKind", "SimDeadlockError",
    "SimReport", "TableEstimator", "TraceEvent", "WorkerSignature",
    "WorkerTrace", "annotate", "canonical_tokens", "collate",
    "collective_estimate", "compute_mfu", "dedup_workers", "generate_trace",
    "load_device_preset", "parse_trace", "pipeline_order", "serialize_trace",
    "simulate", "unique_workers", "validate_trace",
]

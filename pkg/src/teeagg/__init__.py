"""Collaborative training across simulated enclaves with an aggregation barrier.

Gradients reach the aggregator only after zero-sum masking or in-enclave tree
reduction.  Everything runs on a deterministic discrete-event network.
"""
from .config import FaultSpec, JobConfig, LatencyConfig, OpCosts, template, validate
from .simnet import Job, JobResult, run_job

__all__ = [
    "FaultSpec",
    "Job",
    "JobConfig",
    "JobResult",
    "LatencyConfig",
    "OpCosts",
    "run_job",
    "template",
    "validate",
]
__version__ = "0.1.0"

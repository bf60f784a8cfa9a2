"""Inference latency, parameter count, and on-disk size reporting."""
from __future__ import annotations

import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .checkpoint import checkpoint_nbytes, describe
from .layers import count_parameters
from .tensor import Tensor

# Reference figures for the default 462-class model. Latency is
# hardware-dependent and only echoed, never compared against.
REFERENCE_PARAMS = 2_825_942
REFERENCE_SIZE_MB = 11.6
REFERENCE_INFERENCE_MS = 5.85
REFERENCE_INFERENCE_STD_MS = 0.1673
PROTOCOL_BATCHES = 6561
PROTOCOL_BATCH_SIZE = 128


@dataclass
class BenchReport:
    mean_ms: float
    std_ms: float
    batches: int
    batch_size: int
    params_total: int
    model_bytes: int
    warmup: int = 0
    threads: int = 1
    estimator: str = "population std (divide by N)"
    timing_scope: str = "model forward only; input frames generated before the timed loop"
    backend: str = _kernels.BACKEND
    wall_s: float = 0.0
    reference: dict = field(default_factory=lambda: {
        "inference_ms": REFERENCE_INFERENCE_MS, "inference_std_ms": REFERENCE_INFERENCE_STD_MS})

    def to_dict(self):
        return asdict(self)

    def summary(self):
        return (f"{self.mean_ms:.3f} ± {self.std_ms:.3f} ms per batch of {self.batch_size} "
                f"({self.batches} batches, {self.threads} thread(s), {self.backend})")


def timing_stats(timings_ms):
    """Mean and population standard deviation of a sequence of timings."""
    t = np.asarray(timings_ms, dtype=np.float64)
    if t.size == 0:
        raise ValueError("no timings")
    mean = math.fsum(t) / t.size
    var = math.fsum((t - mean) ** 2) / t.size
    return mean, math.sqrt(var)


def measure_inference(model, batches=PROTOCOL_BATCHES, batch_size=PROTOCOL_BATCH_SIZE,
                      window_samples=None, warmup=10, seed=1234, threads=1, pool_size=4,
                      clock=time.perf_counter):
    """Time eval-mode forward passes, one sample per batch.

    A small pool of seeded random batches is materialized up front and
    cycled, so no data generation happens inside the timed region.
    """
    if batches < 1:
        raise ValueError(f"batches must be >= 1, got {batches}")
    window = window_samples or model.config.window_samples
    rng = np.random.default_rng(seed)
    pool = [Tensor(rng.uniform(-1.0, 1.0, size=(batch_size, 1, window)))
            for _ in range(min(pool_size, batches))]
    for i in range(warmup):
        model.forward(pool[i % len(pool)], mode="eval")

    timings = [0.0] * batches

    def worker(indices):
        for i in indices:
            x = pool[i % len(pool)]
            start = clock()
            model.forward(x, mode="eval")
            timings[i] = (clock() - start) * 1000.0

    wall = clock()
    if threads <= 1:
        worker(range(batches))
    else:
        ts = [threading.Thread(target=worker, args=(range(k, batches, threads),))
              for k in range(threads)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
    wall = clock() - wall
    mean, std = timing_stats(timings)
    return BenchReport(mean, std, batches, batch_size, count_parameters(model),
                       checkpoint_nbytes(model), warmup=warmup, threads=max(1, threads),
                       wall_s=wall)


def info(path):
    """Parameter total, file size, and signed deltas against the reference model."""
    d = describe(path)
    size_mb = d["file_bytes"] / 1e6
    return {
        "checkpoint": str(Path(path)),
        "params_total": d["params_total"],
        "model_bytes": d["file_bytes"],
        "header_bytes": d["header_bytes"],
        "payload_bytes": d["payload_bytes"],
        "model_mb": size_mb,
        "model_mib": d["file_bytes"] / 2**20,
        "reference_params": REFERENCE_PARAMS,
        "params_delta": d["params_total"] - REFERENCE_PARAMS,
        "reference_mb": REFERENCE_SIZE_MB,
        "size_delta_mb": size_mb - REFERENCE_SIZE_MB,
        "num_classes": d["config"]["num_classes"],
        "loss": d["config"]["loss"],
        "config": d["config"],
    }

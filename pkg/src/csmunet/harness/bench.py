"""Wall-clock throughput of the scan implementations."""

import time

import numpy as np

from .. import scan

METHODS = ("sequential", "parallel", "fused")


def scan_bench(length=1024, state=16, channels=16, reps=3, seed=0, methods=METHODS):
    """Best-of-``reps`` forward time per token (ns) for each scan method."""
    if min(length, state, channels, reps) < 1:
        raise ValueError("length, state, channels and reps must be positive")
    rng = np.random.default_rng(seed)
    p = scan.init_params(rng, channels, state)
    seq = scan.ScanSequence(rng.standard_normal((length, channels)).astype(np.float32))
    result = {"length": length, "state": state, "channels": channels, "reps": reps,
              "ns_per_token": {}}
    for m in methods:
        scan.scan_forward(seq, p, m)  # warm-up (and JIT compile for fused)
        best = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            scan.scan_forward(seq, p, m)
            best = min(best, time.perf_counter_ns() - t0)
        result["ns_per_token"][m] = best / length
    return result

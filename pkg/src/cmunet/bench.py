"""Wall-time benchmark for the scan kernels.

Measurements are interleaved round-robin across lengths so every timed run
starts from the same cache state; medians drive the growth ratios.
"""

from __future__ import annotations

import platform
import time

import numpy as np

from .errors import DataError
from . import ssm
from . import tensor as T
from .tensor import Tensor


def _instance(length, channels, state, seed=1):
    rng = np.random.default_rng(seed)
    params = ssm.SsmParams(channels, state, dtype=np.float32)
    inputs = ssm.ScanInputs(
        x=Tensor(rng.standard_normal((1, length, channels)).astype(np.float32)),
        delta=Tensor(np.exp(rng.uniform(np.log(1e-3), np.log(1e-1),
                                        (1, length, channels))).astype(np.float32)),
        Bsel=Tensor(rng.standard_normal((1, length, state)).astype(np.float32)),
        Csel=Tensor(rng.standard_normal((1, length, state)).astype(np.float32)))
    return inputs, params


def bench_scan(lengths, channels=16, state=8, reps=5, warmup=3):
    """Time both scan implementations per length; returns the report dict.

    The parallel output is cross-checked against the sequential oracle at
    each length before any timing.
    """
    lengths = list(lengths)
    if lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise DataError("bench: lengths must be strictly ascending")
    if reps < 5:
        raise DataError("bench: need at least 5 timed reps")

    instances = {L: _instance(L, channels, state) for L in lengths}

    with T.no_grad():
        for L in lengths:  # correctness gate
            inputs, params = instances[L]
            y_par = ssm.selective_scan_parallel(inputs, params)
            y_seq = ssm.selective_scan_seq(inputs, params)
            scale = max(float(np.abs(y_seq.data).max()), 1e-30)
            rel = float(np.abs(y_par.data - y_seq.data).max()) / scale
            if rel > 1e-5:
                raise DataError(f"bench: scan mismatch at L={L} (rel {rel:.2e})")

        times = {("parallel", L): [] for L in lengths}
        times.update({("sequential", L): [] for L in lengths})
        for round_idx in range(warmup + reps):
            timed = round_idx >= warmup
            for L in lengths:
                inputs, params = instances[L]
                t0 = time.perf_counter()
                ssm.selective_scan_parallel(inputs, params)
                dt = time.perf_counter() - t0
                if timed:
                    times[("parallel", L)].append(dt)
                t0 = time.perf_counter()
                ssm.selective_scan_seq(inputs, params)
                dt = time.perf_counter() - t0
                if timed:
                    times[("sequential", L)].append(dt)

    report = {"channels": channels, "state": state, "reps": reps, "warmup": warmup,
              "lengths": lengths,
              "environment": f"{platform.platform()} / python {platform.python_version()}"
                             f" / numpy {np.__version__}",
              "results": {}, "ratios": {}}
    for impl in ("parallel", "sequential"):
        report["results"][impl] = {}
        for L in lengths:
            ts = np.array(times[(impl, L)])
            report["results"][impl][str(L)] = {
                "mean_ms": float(ts.mean() * 1e3), "std_ms": float(ts.std() * 1e3),
                "median_ms": float(np.median(ts) * 1e3), "reps": int(ts.size)}
        ratios = {}
        for prev, cur in zip(lengths, lengths[1:]):
            if cur == 2 * prev:
                m_prev = report["results"][impl][str(prev)]["median_ms"]
                m_cur = report["results"][impl][str(cur)]["median_ms"]
                ratios[f"{cur}/{prev}"] = float(m_cur / m_prev)
        report["ratios"][impl] = ratios
    return report

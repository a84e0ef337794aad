"""Micro-benchmarks for the error-to-gradient conversion.

Times only the reverse-time conversion from per-step errors to hidden-state
gradients, which is where the engines differ.  The exact engine is timed
through a dense constant Jacobian multiply so the measurement isolates the
quadratic-in-width recursion from cell-specific arithmetic; the stationary
engines run their real library code; the truncated engine's conversion is
the identity, so it is timed as such.

On a single-core host the scan backend demonstrates its depth reduction
algorithmically (round count grows with log of the window) rather than as
wall-clock parallelism.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .feedback import EngineKind, FeedbackMatrix, dsf_hidden_grads

D_SWEEP = (64, 128, 256, 512)
T_SWEEP = (256, 512, 1024, 2048)
D_SWEEP_STEPS = 64
T_SWEEP_DIM = 64
DEFAULT_BATCH = 64
# The width sweep wants a batch large enough that arithmetic dominates
# dispatch; the length sweep wants buffers small enough to stay inside the
# allocator's heap-reuse regime, because once an array crosses the malloc
# mmap threshold every rep page-faults a fresh mapping and the sweep
# measures the kernel allocator instead of the recursion.
SWEEP_BATCH = {"d": 64, "T": 16}
DEFAULT_REPS = 9
WARMUPS = 3

# Acceptable log-log slopes for (engine, axis) sweeps.  Wide on purpose:
# the claims are asymptotic and desk timings carry cache and dispatch noise.
EXPONENT_BANDS = {
    (EngineKind.BPTT, "d"): (1.6, 2.4),
    (EngineKind.DSF_SEQUENTIAL, "d"): (0.7, 1.3),
    (EngineKind.DSF_SEQUENTIAL, "T"): (0.8, 1.2),
    (EngineKind.FTBPTT, "T"): (-0.2, 0.4),
}


@dataclass(frozen=True)
class BenchResult:
    engine: EngineKind
    d: int
    steps: int
    median_ns: float
    iqr_ns: float
    reps: int

    def __post_init__(self):
        if self.reps < 5:
            raise ValueError("reps must be at least 5")


def _dense_bptt_runner(errors: np.ndarray, jac: np.ndarray) -> Callable[[], np.ndarray]:
    steps = errors.shape[0]

    def run() -> np.ndarray:
        g = np.empty_like(errors)
        g[steps - 1] = errors[steps - 1]
        for t in range(steps - 2, -1, -1):
            np.matmul(g[t + 1], jac, out=g[t])
            g[t] += errors[t]
        return g

    return run


def _make_runner(engine: EngineKind, errors: np.ndarray,
                 rng: np.random.Generator) -> Callable[[], np.ndarray]:
    d = errors.shape[-1]
    if engine is EngineKind.BPTT:
        jac = rng.standard_normal((d, d)) / np.sqrt(d)
        return _dense_bptt_runner(errors, jac)
    if engine is EngineKind.FTBPTT:
        # identity conversion: the truncated engine reuses the error buffer
        return lambda: errors
    feedback = FeedbackMatrix(rng.uniform(0.0, 1.0, size=d))
    feedback.kernel(errors.shape[0])  # build outside the timed region
    return lambda: dsf_hidden_grads(errors, feedback, engine)


def time_hidden_grads(engine: EngineKind, d: int, steps: int,
                      reps: int = DEFAULT_REPS,
                      batch: int = DEFAULT_BATCH,
                      seed: int = 0) -> BenchResult:
    """Median wall time of one error-to-gradient conversion."""
    if reps < 5:
        raise ValueError("reps must be at least 5")
    rng = np.random.default_rng(seed)
    errors = rng.standard_normal((steps, batch, d))
    run = _make_runner(engine, errors, rng)

    for _ in range(WARMUPS):
        run()
    samples = np.empty(reps)
    for i in range(reps):
        start = time.perf_counter_ns()
        run()
        samples[i] = time.perf_counter_ns() - start

    q25, q50, q75 = np.percentile(samples, [25.0, 50.0, 75.0])
    return BenchResult(engine=engine, d=d, steps=steps,
                       median_ns=float(q50), iqr_ns=float(q75 - q25),
                       reps=reps)


def sweep(engine: EngineKind, axis: str,
          reps: int = DEFAULT_REPS,
          batch: int | None = None,
          seed: int = 0) -> list[BenchResult]:
    """Run the standard size sweep along one axis, the other held fixed."""
    if axis == "d":
        points = [(d, D_SWEEP_STEPS) for d in D_SWEEP]
    elif axis == "T":
        points = [(T_SWEEP_DIM, steps) for steps in T_SWEEP]
    else:
        raise ValueError(f"axis must be 'd' or 'T', got {axis!r}")
    if batch is None:
        batch = SWEEP_BATCH[axis]
    return [time_hidden_grads(engine, d, steps, reps=reps, batch=batch,
                              seed=seed)
            for d, steps in points]


def fit_scaling_exponent(results: Sequence[BenchResult], axis: str) -> float:
    """Least-squares slope of log median time against log size."""
    if axis == "d":
        sizes = [r.d for r in results]
    elif axis == "T":
        sizes = [r.steps for r in results]
    else:
        raise ValueError(f"axis must be 'd' or 'T', got {axis!r}")
    if len(set(sizes)) < 4:
        raise ValueError("need at least 4 distinct sizes to fit an exponent")
    if max(sizes) < 8 * min(sizes):
        raise ValueError("sizes must span at least a factor of 8")
    logs = np.log(np.asarray(sizes, dtype=np.float64))
    logt = np.log(np.asarray([r.median_ns for r in results], dtype=np.float64))
    slope, _ = np.polyfit(logs, logt, 1)
    return float(slope)


def expected_band(engine: EngineKind, axis: str) -> tuple[float, float]:
    try:
        return EXPONENT_BANDS[(engine, axis)]
    except KeyError:
        raise ValueError(f"no expected exponent band for {engine.value} "
                         f"along {axis}") from None


def write_csv(results: Sequence[BenchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["engine", "d", "T", "median_ns", "iqr_ns", "reps"])
        for r in results:
            writer.writerow([r.engine.value, r.d, r.steps,
                             int(r.median_ns), int(r.iqr_ns), r.reps])


def read_csv(path) -> list[BenchResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(BenchResult(engine=EngineKind.parse(row["engine"]),
                                   d=int(row["d"]), steps=int(row["T"]),
                                   median_ns=float(row["median_ns"]),
                                   iqr_ns=float(row["iqr_ns"]),
                                   reps=int(row["reps"])))
    return out
